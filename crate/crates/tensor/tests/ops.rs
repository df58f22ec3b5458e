use onestream_tensor::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use onestream_tensor::nn::{Conv2d, Deconv2d, Linear};
use onestream_tensor::{
    step_decay_lr, AdamState, Graph, ParamStore, Result, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts a tensor-valued output with fixed random weights so every
/// output element influences the scalar loss.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn grad_check_inputs(
    name: &str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + Copy,
) {
    let store = ParamStore::new();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let report = check_inputs(
            &store,
            &inputs,
            |g, v| {
                let y = f(g, v)?;
                project(g, y, seed)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(
            report.max_rel_err < OP_TOL,
            "{name} seed {seed}: {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn matmul_identity_and_scalar() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let i = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_f64(vec![2, 2], &[1.5, -2.0, 3.0, 4.25]).unwrap());
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.5, -2.0, 3.0, 4.25]);
    let a = g.constant(Tensor::scalar(2.0).reshape(vec![1, 1]).unwrap());
    let b = g.constant(Tensor::scalar(3.0).reshape(vec![1, 1]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_4x5_by_5x3_matches_finite_differences() {
    // Tighter than the generic operator tolerance.
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![rand_tensor(&[4, 5], &mut rng), rand_tensor(&[5, 3], &mut rng)];
    let report = check_inputs(
        &store,
        &inputs,
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 7)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn gradients_of_every_operator() {
    grad_check_inputs("matmul", &[&[4, 5], &[5, 3]], |g, v| g.matmul(v[0], v[1]));
    grad_check_inputs("matmul_nt", &[&[4, 5], &[3, 5]], |g, v| g.matmul_nt(v[0], v[1]));
    grad_check_inputs("matmul_tn", &[&[5, 4], &[5, 3]], |g, v| {
        g.matmul_ex(v[0], v[1], true, false)
    });
    grad_check_inputs("matmul_tt", &[&[5, 4], &[3, 5]], |g, v| {
        g.matmul_ex(v[0], v[1], true, true)
    });
    grad_check_inputs("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    grad_check_inputs("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    grad_check_inputs("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    grad_check_inputs("scale", &[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7)));
    grad_check_inputs("add_bias", &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    grad_check_inputs("relu", &[&[5, 6]], |g, v| Ok(g.relu(v[0])));
    grad_check_inputs("sigmoid", &[&[5, 6]], |g, v| Ok(g.sigmoid(v[0])));
    grad_check_inputs("softmax_rows", &[&[3, 7]], |g, v| g.softmax_rows(v[0]));
    grad_check_inputs("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    grad_check_inputs("max_axis0", &[&[5, 4]], |g, v| g.max_axis(v[0], 0));
    grad_check_inputs("max_axis1", &[&[3, 6, 4]], |g, v| g.max_axis(v[0], 1));
    grad_check_inputs("concat0", &[&[2, 3], &[4, 3]], |g, v| g.concat(v, 0));
    grad_check_inputs("concat1", &[&[3, 2], &[3, 5]], |g, v| g.concat(v, 1));
    grad_check_inputs("slice", &[&[5, 6]], |g, v| g.slice(v[0], 1, 2, 3));
    grad_check_inputs("reshape", &[&[4, 6]], |g, v| g.reshape(v[0], &[2, 12]));
    grad_check_inputs("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 3]));
    grad_check_inputs("scatter_max_rows", &[&[6, 3]], |g, v| {
        g.scatter_max_rows(v[0], &[Some(0), Some(2), None, Some(0), Some(2), Some(1)], 4)
    });
    grad_check_inputs("conv2d_3x3", &[&[5, 4, 3], &[27, 2], &[2]], |g, v| {
        g.conv2d(v[0], v[1], v[2], 3, 1, 1)
    });
    grad_check_inputs("conv2d_stride2", &[&[5, 6, 2], &[18, 3], &[3]], |g, v| {
        g.conv2d(v[0], v[1], v[2], 3, 2, 1)
    });
    grad_check_inputs("deconv2d", &[&[3, 2, 2], &[2, 12], &[3]], |g, v| {
        g.deconv2d(v[0], v[1], v[2], 5, 4)
    });
    grad_check_inputs("sum", &[&[3, 3]], |g, v| Ok(g.sum(v[0])));
    grad_check_inputs("mean", &[&[3, 3]], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn softmax_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(vec![2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let v = g.value(y).data();
    for &p in &v[..3] {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v[3] - 1.0).abs() < 1e-15 && v[4] < 1e-300 && v.iter().all(|p| p.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = g.constant(rand_tensor(&[3, 4], &mut rng));
    let s = g.softmax_rows(r).unwrap();
    for row in g.value(s).data().chunks(4) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_in_f32() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = g.constant(Tensor::from_fn(vec![16, 33], |_| rng.gen_range(-30.0f32..30.0)));
    let y = g.softmax_rows(x).unwrap();
    for row in g.value(y).data().chunks(33) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let gamma = g.constant(Tensor::full(vec![2], 1.0));
    let beta = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(Tensor::from_f64(vec![2, 2], &[3.0, 3.0, 1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta).unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    // eps = 1e-5 inside the square root.
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((v[2] - expected).abs() < 1e-15 && (v[3] + expected).abs() < 1e-15);
    assert!((v[2] - 1.0).abs() < 1e-5);
}

#[test]
fn max_pool_conv_and_deconv_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 5.0, 3.0, 2.0]).unwrap());
    let m = g.max_axis(x, 0).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = rand_tensor(&[4, 5, 3], &mut rng);
    let xi = g.constant(img.clone());
    let mut eye = Tensor::zeros(vec![3, 3]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    let w = g.constant(eye);
    let b = g.constant(Tensor::zeros(vec![3]));
    let y = g.conv2d(xi, w, b, 1, 1, 0).unwrap();
    assert_eq!(g.value(y), &img);

    let small = g.constant(rand_tensor(&[2, 2, 3], &mut rng));
    let dw = g.constant(rand_tensor(&[3, 8], &mut rng));
    let db = g.constant(Tensor::zeros(vec![2]));
    let up = g.deconv2d(small, dw, db, 4, 4).unwrap();
    assert_eq!(g.shape(up), &[4, 4, 2]);
}

#[test]
fn conv_same_padding_preserves_grid() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = Conv2d::new(&mut store, "c", 4, 6, 3, 1, &mut rng).unwrap();
    let down = Conv2d::new(&mut store, "d", 6, 6, 3, 2, &mut rng).unwrap();
    let up = Deconv2d::new(&mut store, "u", 6, 5, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let x = g.constant(rand_tensor(&[24, 38, 4], &mut rng));
    let y = conv.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[24, 38, 6]);
    let d = down.forward(&mut g, y).unwrap();
    assert_eq!(g.shape(d), &[12, 19, 6]);
    let u = up.forward(&mut g, d, 24, 38).unwrap();
    assert_eq!(g.shape(u), &[24, 38, 5]);
}

#[test]
fn parameter_gradients_through_layers() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lin = Linear::new(&mut store, "lin", 3, 4, &mut rng).unwrap();
    let conv = Conv2d::new(&mut store, "conv", 4, 2, 3, 1, &mut rng).unwrap();
    let x = rand_tensor(&[6, 3], &mut rng);
    let report = check_params(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let h = lin.forward(g, xv)?;
            let h = g.relu(h);
            let img = g.reshape(h, &[2, 3, 4])?;
            let y = conv.forward(g, img)?;
            project(g, y, 9)
        },
        DEFAULT_STEP,
        64,
    )
    .unwrap();
    assert!(report.max_rel_err < OP_TOL, "{report:?}");
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
    let before = store.value(store.id("w").unwrap()).clone();
    let mut adam = AdamState::new(&store, 1e-3);
    let mut grads = onestream_tensor::Gradients::empty(store.len());
    // A missing gradient and an explicit zero gradient both leave values alone.
    for _ in 0..5 {
        adam.step(&mut store, &grads).unwrap();
    }
    let mut g = Graph::new(&store);
    let w = g.param(store.id("w").unwrap());
    let z = g.constant(Tensor::zeros(vec![3]));
    let p = g.mul(w, z).unwrap();
    let l = g.sum(p);
    grads = g.backward(l).unwrap();
    adam.step(&mut store, &grads).unwrap();
    assert_eq!(store.value(store.id("w").unwrap()), &before);
}

#[test]
fn adam_minimizes_scalar_quadratic() {
    // loss = (w - 3)^2, minimum at w = 3.
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(-2.0)).unwrap();
    let mut adam = AdamState::new(&store, 0.1);
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let t = g.constant(Tensor::scalar(3.0));
            let d = g.sub(w, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap()
        };
        adam.step(&mut store, &grads).unwrap();
    }
    let w = store.value(id).item();
    assert!((w - 3.0).abs() < 1e-2, "w = {w}");
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("encoder.block0.qkv.weight", Tensor::scalar(1.0)).unwrap();
    let mut adam = AdamState::new(&store, 1e-3);
    let mut g = Graph::new(&store);
    let w = g.param(id);
    let nan = g.constant(Tensor::scalar(f64::NAN));
    let p = g.mul(w, nan).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let err = adam.step(&mut store, &grads).unwrap_err();
    assert!(err.to_string().contains("encoder.block0.qkv.weight"));
    assert_eq!(store.value(id).item(), 1.0);
}

#[test]
fn learning_rate_schedule() {
    assert_eq!(step_decay_lr(1e-3, 0, 6, 5.0), 1e-3);
    assert_eq!(step_decay_lr(1e-3, 5, 6, 5.0), 1e-3);
    assert!((step_decay_lr(1e-3, 6, 6, 5.0) - 1e-3 / 5.0).abs() < 1e-18);
    assert!((step_decay_lr(1e-3, 12, 6, 5.0) - 1e-3 / 25.0).abs() < 1e-18);
}

#[test]
fn backward_requires_scalar_loss() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::zeros(vec![2]), true);
    assert!(g.backward(x).is_err());
}

proptest! {
    #[test]
    fn reshape_round_trip_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::from_fn(vec![rows, cols], |_| rng.gen());
        let back = t.clone().reshape(vec![rows * cols]).unwrap().reshape(vec![rows, cols]).unwrap();
        prop_assert_eq!(back, t);
    }
}
