//! Attention and ICM layer checks against plain-loop oracles.

mod common;

use icm_core::attention::{
    accumulate_memory, dot_attention, gate_combine, project_qkv, retrieve_memory, sigma,
    AttentionConfig, IcmAttention, MemoryState,
};
use icm_core::encoder::{Encoder, EncoderConfig};
use icm_core::mixer::MixerKind;
use icm_core::tensor::ParamStore;
use icm_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

fn layer(d_model: usize, heads: usize, seed: u64) -> (ParamStore<f64>, IcmAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig::new(d_model, heads).unwrap();
    let l = IcmAttention::new(&mut store, "attn", cfg, &mut rng).unwrap();
    // non-zero biases so the oracle exercises them
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    (store, l)
}

fn set_beta(store: &mut ParamStore<f64>, l: &IcmAttention, v: f64) {
    for b in store.get_mut(l.beta).tensor.data_mut() {
        *b = v;
    }
}

fn icm_forward(store: &ParamStore<f64>, l: &IcmAttention, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = l.forward(&mut g, &p, xv).unwrap();
    g.tensor(y)
}

fn vanilla_forward(store: &ParamStore<f64>, l: &IcmAttention, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = l.attn.forward(&mut g, &p, xv).unwrap();
    g.tensor(y)
}

/// Reorders axis 0 of `x` so that slice `i` of the result is slice `perm[i]` of `x`.
fn permute_channels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let inner = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(x.len());
    for &src in perm {
        data.extend_from_slice(&x.data()[src * inner..(src + 1) * inner]);
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn weights<'a>(store: &'a ParamStore<f64>, l: &IcmAttention) -> common::LayerWeights<'a> {
    let proj = &l.attn.proj;
    common::LayerWeights {
        wq: store.tensor(proj.query.weight),
        bq: store.tensor(proj.query.bias.unwrap()),
        wk: store.tensor(proj.key.weight),
        bk: store.tensor(proj.key.bias.unwrap()),
        wv: store.tensor(proj.value.weight),
        bv: store.tensor(proj.value.bias.unwrap()),
        wo: store.tensor(proj.output.weight),
        bo: store.tensor(proj.output.bias.unwrap()),
        beta: store.tensor(l.beta),
    }
}

#[test]
fn projection_identity_zero_and_random() {
    let (mut store, l) = layer(4, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5, 4], &mut rng);
    let cfg = l.attn.cfg;

    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let (q, k, v) = project_qkv(&mut g, &p, &l.attn.proj, &cfg, xv).unwrap();
        (g.tensor(q), g.tensor(k), g.tensor(v))
    };

    let (q, k, v) = run(&store);
    let proj = &l.attn.proj;
    for (got, lin) in [(&q, &proj.query), (&k, &proj.key), (&v, &proj.value)] {
        let flat = common::affine(x.data(), 15, store.tensor(lin.weight), store.tensor(lin.bias.unwrap()));
        let want = common::heads_of(&flat, 3, 5, 2, 2);
        assert_eq!(got.shape(), &[3, 2, 5, 2]);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    for lin in [&proj.query, &proj.key, &proj.value] {
        let w = &mut store.get_mut(lin.weight).tensor;
        *w = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        store.get_mut(lin.bias.unwrap()).tensor = Tensor::zeros([4]);
    }
    let (q, _, _) = run(&store);
    assert!(q.max_abs_diff(&common::heads_of(x.data(), 3, 5, 2, 2)).unwrap() == 0.0);

    for lin in [&proj.query, &proj.key, &proj.value] {
        store.get_mut(lin.weight).tensor = Tensor::zeros([4, 4]);
    }
    let (q, k, v) = run(&store);
    for t in [q, k, v] {
        assert!(t.data().iter().all(|&a| a == 0.0));
    }
}

#[test]
fn projection_width_mismatch_is_a_dimension_error() {
    let (store, l) = layer(4, 2, 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros([1, 2, 3]));
    assert!(matches!(
        project_qkv(&mut g, &p, &l.attn.proj, &l.attn.cfg, x),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn memory_starts_at_zero() {
    let mut g = Graph::<f64>::new();
    let s = MemoryState::zeros(&mut g, 2, 3);
    assert_eq!(g.shape(s.memory), &[2, 3, 3]);
    assert_eq!(g.shape(s.normalizer), &[2, 3, 1]);
    assert!(g.value(s.memory).iter().chain(g.value(s.normalizer)).all(|&v| v == 0.0));
}

#[test]
fn single_token_memory_and_read() {
    // σ(0) = 1 and σ(-800) underflows to exactly 0.
    let mut g = Graph::<f64>::new();
    let s = MemoryState::zeros(&mut g, 1, 2);
    let k = g.constant(Tensor::new([1, 1, 2], vec![0.0, -800.0]).unwrap());
    let v = g.constant(Tensor::new([1, 1, 2], vec![2.0, 3.0]).unwrap());
    let s = accumulate_memory(&mut g, s, k, v).unwrap();
    assert_eq!(g.value(s.memory), &[2.0, 3.0, 0.0, 0.0]);
    assert_eq!(g.value(s.normalizer), &[1.0, 0.0]);

    let q = g.constant(Tensor::new([1, 1, 2], vec![0.0, -800.0]).unwrap());
    let a = retrieve_memory(&mut g, q, &s, 1e-6).unwrap();
    let a = g.value(a);
    assert!((a[0] - 2.0 / (1.0 + 1e-6)).abs() < 1e-15);
    assert!((a[1] - 3.0 / (1.0 + 1e-6)).abs() < 1e-15);

    let q = g.constant(Tensor::new([1, 1, 2], vec![-50.0, -50.0]).unwrap());
    let a = retrieve_memory(&mut g, q, &s, 1e-6).unwrap();
    assert!(g.value(a).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn accumulation_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k1 = random(&[2, 3, 2], &mut rng);
    let v1 = random(&[2, 3, 2], &mut rng);
    let k2 = random(&[2, 3, 2], &mut rng);
    let v2 = random(&[2, 3, 2], &mut rng);
    let run = |order: [(&Tensor<f64>, &Tensor<f64>); 2]| {
        let mut g = Graph::<f64>::new();
        let mut s = MemoryState::zeros(&mut g, 2, 2);
        for (k, v) in order {
            let k = g.constant(k.clone());
            let v = g.constant(v.clone());
            s = accumulate_memory(&mut g, s, k, v).unwrap();
        }
        (g.tensor(s.memory), g.tensor(s.normalizer))
    };
    let a = run([(&k1, &v1), (&k2, &v2)]);
    let b = run([(&k2, &v2), (&k1, &v1)]);
    assert_eq!(a, b);
}

#[test]
fn retrieval_matches_concatenated_token_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let dk = rng.random_range(1..=4);
        let h = rng.random_range(1..=2);
        let q = random(&[m, h, n, dk], &mut rng);
        let k = random(&[m, h, n, dk], &mut rng);
        let v = random(&[m, h, n, dk], &mut rng);

        let mut g = Graph::new();
        let s = MemoryState::zeros(&mut g, h, dk);
        let (kv, vv, qv) = (g.constant(k.clone()), g.constant(v.clone()), g.constant(q.clone()));
        let s = accumulate_memory(&mut g, s, kv, vv).unwrap();
        let a = retrieve_memory(&mut g, qv, &s, 1e-6).unwrap();
        let want = common::concatenated_linear_attention(&q, &k, &v, 1e-6);
        worst = worst.max(g.tensor(a).max_abs_diff(&want).unwrap());
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn dot_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // n = 1
    let mut g = Graph::new();
    let q = g.constant(random(&[2, 1, 3], &mut rng));
    let k = g.constant(random(&[2, 1, 3], &mut rng));
    let vt = random(&[2, 1, 3], &mut rng);
    let v = g.constant(vt.clone());
    let a = dot_attention(&mut g, q, k, v).unwrap();
    assert!(g.tensor(a).max_abs_diff(&vt).unwrap() < 1e-15);

    // identical keys → uniform weights → column means of V
    let mut g = Graph::new();
    let q = g.constant(random(&[1, 4, 2], &mut rng));
    let k = g.constant(Tensor::from_fn([1, 4, 2], |i| [0.7, -1.1][i % 2]));
    let vt = random(&[1, 4, 2], &mut rng);
    let v = g.constant(vt.clone());
    let a = dot_attention(&mut g, q, k, v).unwrap();
    let a = g.tensor(a);
    for d in 0..2 {
        let mean = (0..4).map(|t| vt.at(&[0, t, d])).sum::<f64>() / 4.0;
        for t in 0..4 {
            assert!((a.at(&[0, t, d]) - mean).abs() < 1e-14);
        }
    }

    let q = random(&[3, 2, 5, 4], &mut rng);
    let k = random(&[3, 2, 5, 4], &mut rng);
    let v = random(&[3, 2, 5, 4], &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let a = dot_attention(&mut g, qv, kv, vv).unwrap();
    let want = common::softmax_attention(&q, &k, &v);
    assert!(g.tensor(a).max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn gate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mem = random(&[2, 3, 2], &mut rng);
    let dot = random(&[2, 3, 2], &mut rng);
    let run = |beta: f64| {
        let mut g = Graph::new();
        let m = g.constant(mem.clone());
        let d = g.constant(dot.clone());
        let b = g.constant(Tensor::full([2], beta));
        let a = gate_combine(&mut g, m, d, b).unwrap();
        g.tensor(a)
    };
    let half = Tensor::from_fn([2, 3, 2], |i| 0.5 * (mem.data()[i] + dot.data()[i]));
    assert!(run(0.0).max_abs_diff(&half).unwrap() < 1e-15);
    assert!(run(-40.0).max_abs_diff(&dot).unwrap() < 1e-15);
    assert!(run(40.0).max_abs_diff(&mem).unwrap() < 1e-15);

    // heads are gated separately
    let mut g = Graph::new();
    let m = g.constant(mem.clone());
    let d = g.constant(dot.clone());
    let b = g.constant(Tensor::new([2], vec![-40.0, 40.0]).unwrap());
    let a = gate_combine(&mut g, m, d, b).unwrap();
    let a = g.tensor(a);
    assert!((a.at(&[0, 1, 1]) - dot.at(&[0, 1, 1])).abs() < 1e-15);
    assert!((a.at(&[1, 1, 1]) - mem.at(&[1, 1, 1])).abs() < 1e-15);
}

#[test]
fn single_channel_with_closed_gate_is_vanilla_attention() {
    let (mut store, l) = layer(8, 2, 6);
    set_beta(&mut store, &l, -40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 6, 8], &mut rng);
    let d = icm_forward(&store, &l, &x).max_abs_diff(&vanilla_forward(&store, &l, &x)).unwrap();
    assert!(d < 1e-10, "{d:e}");
}

#[test]
fn two_channel_layer_matches_transcription_oracle() {
    for seed in 0..5 {
        let (mut store, l) = layer(8, 2, 10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let beta = random(&[2], &mut rng);
        store.get_mut(l.beta).tensor = beta;
        let x = random(&[2, 5, 8], &mut rng);
        let got = icm_forward(&store, &l, &x);
        let want = common::icm_layer(&x, &weights(&store, &l), 2, 1e-6);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }
}

#[test]
fn empty_channel_set_is_a_contract_error() {
    let (store, l) = layer(4, 2, 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros([0, 3, 4]));
    assert!(matches!(l.forward(&mut g, &p, x), Err(Error::Contract(_))));
}

#[test]
fn beta_gradient_is_nonzero_and_matches_finite_differences() {
    let (mut store, l) = layer(8, 2, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    store.get_mut(l.beta).tensor = Tensor::new([2], vec![0.3, -0.4]).unwrap();
    let x = random(&[2, 4, 8], &mut rng);
    let w = random(&[2, 4, 8], &mut rng);

    let loss = |store: &ParamStore<f64>| {
        let y = icm_forward(store, &l, &x);
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = l.forward(&mut g, &p, xv).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let total = g.sum(prod);
    let grads = g.backward(total).unwrap();
    let analytic = grads.get(p.var(l.beta)).unwrap().to_vec();

    let h = 1e-5;
    for j in 0..2 {
        let mut plus = store.clone();
        plus.get_mut(l.beta).tensor.data_mut()[j] += h;
        let mut minus = store.clone();
        minus.get_mut(l.beta).tensor.data_mut()[j] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!(analytic[j].abs() > 1e-6, "gradient vanished: {analytic:?}");
        let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs());
        assert!(rel < 1e-4, "head {j}: analytic {} numeric {numeric}", analytic[j]);
    }
}

#[test]
fn tiny_icm_adds_sixteen_parameters() {
    let base = Encoder::<f32>::new(EncoderConfig::tiny(MixerKind::ChannelIndependent), 0).unwrap();
    let icm = Encoder::<f32>::new(EncoderConfig::tiny(MixerKind::Icm), 0).unwrap();
    assert_eq!(icm.num_parameters() - base.num_parameters(), 16);
    let gates: usize = icm
        .params()
        .iter()
        .filter(|p| p.name.ends_with("attn.beta"))
        .map(|p| p.tensor.len())
        .sum();
    assert_eq!(gates, 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn layer_is_channel_permutation_equivariant(seed in 0u64..1000, m in 1usize..5, n in 1usize..6) {
        let (mut store, l) = layer(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        store.get_mut(l.beta).tensor = random(&[2], &mut rng);
        let x = random(&[m, n, 8], &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.rotate_left(rng.random_range(0..m));
        if m > 2 {
            perm.swap(0, 2);
        }
        let y = icm_forward(&store, &l, &x);
        let yp = icm_forward(&store, &l, &permute_channels(&x, &perm));
        prop_assert!(yp.max_abs_diff(&permute_channels(&y, &perm)).unwrap() < 1e-10);
    }

    #[test]
    fn closed_gate_matches_vanilla_for_any_channel_count(seed in 0u64..1000, m in 1usize..5) {
        let (mut store, l) = layer(8, 2, seed);
        set_beta(&mut store, &l, -40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let x = random(&[m, 4, 8], &mut rng);
        let d = icm_forward(&store, &l, &x).max_abs_diff(&vanilla_forward(&store, &l, &x)).unwrap();
        prop_assert!(d < 1e-10);
    }

    #[test]
    fn normalizer_is_strictly_positive(keys in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let s = MemoryState::zeros(&mut g, 2, 2);
        let k = g.constant(Tensor::new([2, 3, 2], keys).unwrap());
        let v = g.constant(Tensor::full([2, 3, 2], 1.0));
        let s = accumulate_memory(&mut g, s, k, v).unwrap();
        prop_assert!(g.value(s.normalizer).iter().all(|&z| z > 0.0));
        let sk = sigma(&mut g, k);
        prop_assert!(g.value(sk).iter().all(|&z| z > 0.0));
    }
}
