use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_nn::{ConvCfg, Graph, Lstm, ParamStore, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares analytic input gradients with central differences of
/// `sum(out * weights)`.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor], w: Option<&Tensor>| -> (f64, Option<Tensor>, Vec<usize>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let w = w.cloned();
        let val = match &w {
            Some(w) => g
                .value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum(),
            None => 0.0,
        };
        (val, w, shape)
    };
    let (_, _, out_shape) = eval(&inputs, None);
    let weights = rand_tensor(&mut rng, &out_shape);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars);
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv);
    let loss = g.sum(prod);
    let (_, grads) = g.backward_with_inputs(loss);

    let eps = 1e-2f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(&v.index())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0)
                / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            assert!(
                (a - numeric).abs() <= 2e-2 * (1.0 + numeric.abs()),
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv2d_strided_dilated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [
        ConvCfg::same(3, 1),
        ConvCfg {
            stride: 2,
            pad: 1,
            dilation: 1,
        },
        ConvCfg::same(3, 2),
        ConvCfg::default(),
    ] {
        let k = if cfg == ConvCfg::default() { 1 } else { 3 };
        check(
            vec![
                rand_tensor(&mut rng, &[2, 2, 6, 5]),
                rand_tensor(&mut rng, &[3, 2, k, k]),
                rand_tensor(&mut rng, &[3]),
            ],
            |g, v| g.conv2d(v[0], v[1], v[2], cfg),
        );
    }
}

#[test]
fn linear_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(
        vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
            rand_tensor(&mut rng, &[5]),
        ],
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    check(
        vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
        ],
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn pooling_upsample_concat_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(vec![rand_tensor(&mut rng, &[1, 2, 4, 6])], |g, v| {
        g.maxpool2(v[0])
    });
    check(vec![rand_tensor(&mut rng, &[1, 2, 5, 4])], |g, v| {
        g.avgpool2(v[0])
    });
    check(vec![rand_tensor(&mut rng, &[1, 2, 2, 3])], |g, v| {
        g.upsample2(v[0], 5, 6)
    });
    check(
        vec![
            rand_tensor(&mut rng, &[2, 1, 3]),
            rand_tensor(&mut rng, &[2, 2, 3]),
        ],
        |g, v| g.concat(&[v[0], v[1]], 1),
    );
    check(vec![rand_tensor(&mut rng, &[1, 1, 5, 5])], |g, v| {
        g.crop2d(v[0], 1, 2, 3, 2)
    });
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 4]);
    check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![x.clone()], |g, v| g.tanh(v[0]));
    check(vec![x.clone()], |g, v| g.exp(v[0]));
    check(vec![x.clone()], |g, v| g.softplus(v[0]));
    check(vec![x.map(|v| v.abs() + 0.5)], |g, v| {
        g.sqrt_eps(v[0], 1e-3)
    });
    check(vec![x.clone()], |g, v| g.log_softmax(v[0]));
    check(vec![x.clone()], |g, v| g.sum_last(v[0]));
    check(vec![x.clone()], |g, v| g.gather_last(v[0], &[1, 3, 0]));
    check(vec![x.clone()], |g, v| g.select_rows(v[0], &[2, 0, 2]));
    check(vec![x.clone(), rand_tensor(&mut rng, &[4])], |g, v| {
        g.add_row(v[0], v[1])
    });
    check(vec![rand_tensor(&mut rng, &[3, 1])], |g, v| {
        g.broadcast_cols(v[0], 4)
    });
    check(vec![x.clone(), x.map(|v| v * 0.5 - 0.1)], |g, v| {
        let a = g.mul(v[0], v[1]);
        let b = g.sub(a, v[1]);
        g.add(b, v[0])
    });
}

#[test]
fn lstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, &mut rng, "lstm", 3, 4);
    check(
        vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
        ],
        |g, v| lstm.forward(g, &store, v),
    );
}

#[test]
fn shared_parameter_gradients_sum() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let p = g.mul(a, b);
    let loss = g.sum(p);
    let grads = g.backward(loss);
    assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0]);
}

proptest! {
    #[test]
    fn log_softmax_rows_normalise(vals in proptest::collection::vec(-30.0f32..30.0, 1..12)) {
        let n = vals.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, n], vals));
        let y = g.log_softmax(x);
        let total: f32 = g.value(y).data().iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv_identity_kernel_is_identity(h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 1, h, w]);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k);
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(xv, kv, b, ConvCfg::same(3, 1));
        prop_assert_eq!(g.value(y), &x);
    }
}
