use patrack_core::tensor::{finite_diff_gradient, max_relative_error, PoolKind, Rng, Tape, Var};
use patrack_core::Tensor;
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Analytic gradient of `build(x)` summed with fixed random weights, against
/// central differences. Returns the max relative error.
fn check(x: &Tensor<f64>, seed: u64, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let forward = |tape: &mut Tape<f64>, xv: Var| {
        let y = build(tape, xv);
        // random projection so every output coordinate matters
        let mut r = Rng::new(seed);
        let w = Tensor::from_fn(tape.shape(y), |_| r.uniform(0.5, 1.5));
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = forward(&mut tape, xv);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap().clone();
    let numeric = finite_diff_gradient(
        |probe| {
            let mut tape = Tape::new();
            let xv = tape.leaf(probe.clone(), false);
            let l = forward(&mut tape, xv);
            tape.value(l).data()[0]
        },
        x,
        1e-5,
    );
    max_relative_error(analytic.data(), numeric.data(), 1e-6).0
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    let v = tape.constant(t(&[2, 1], &[5., 7.]));
    let y = tape.matmul(i, v).unwrap();
    assert_eq!(tape.value(y).data(), &[5., 7.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let b = random(&[4, 2], &mut rng);
    let a = random(&[3, 4], &mut rng);
    let err = check(&a, 1, |tape, x| {
        let bv = tape.constant(b.clone());
        tape.matmul(x, bv).unwrap()
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&b, 2, |tape, x| {
        let av = tape.constant(a.clone());
        tape.matmul(av, x).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_nt_and_transpose_gradients() {
    let mut rng = Rng::new(12);
    let b = random(&[5, 4], &mut rng);
    let a = random(&[3, 4], &mut rng);
    let err = check(&a, 3, |tape, x| {
        let bv = tape.constant(b.clone());
        tape.matmul_nt(x, bv).unwrap()
    });
    assert!(err < 1e-6);
    let err = check(&b, 4, |tape, x| {
        let av = tape.constant(a.clone());
        tape.matmul_nt(av, x).unwrap()
    });
    assert!(err < 1e-6);
    let err = check(&a, 5, |tape, x| tape.transpose(x).unwrap());
    assert!(err < 1e-6);
}

#[test]
fn elementwise_basics() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2], &[1., 2.]));
    let b = tape.constant(t(&[2], &[3., 4.]));
    let y = tape.add(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4., 6.]);
    let z = tape.constant(t(&[1], &[0.0]));
    let g = tape.gelu(z);
    assert_eq!(tape.value(g).data(), &[0.0]);
    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let x = t(&[3], &[-1.0, 0.5, 2.0]);
    let err = check(&x, 6, |tape, v| tape.gelu(v));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pointwise_gradients() {
    let mut rng = Rng::new(13);
    let x = Tensor::from_fn(&[6], |_| rng.uniform(0.2, 2.0));
    let y = Tensor::from_fn(&[6], |_| rng.uniform(0.2, 2.0));
    for (i, op) in ["sub", "mul", "div", "max", "min", "sigmoid", "exp", "ln", "abs", "relu", "scale"]
        .iter()
        .enumerate()
    {
        let err = check(&x, 20 + i as u64, |tape, v| {
            let yv = tape.constant(y.clone());
            match *op {
                "sub" => tape.sub(yv, v).unwrap(),
                "mul" => tape.mul(v, yv).unwrap(),
                "div" => tape.div(yv, v).unwrap(),
                "max" => tape.maximum(v, yv).unwrap(),
                "min" => tape.minimum(yv, v).unwrap(),
                "sigmoid" => tape.sigmoid(v),
                "exp" => tape.exp(v),
                "ln" => tape.ln(v),
                "abs" => {
                    let s = tape.add_scalar(v, -1.0);
                    tape.abs(s)
                }
                "relu" => {
                    let s = tape.add_scalar(v, -1.0);
                    tape.relu(s)
                }
                _ => tape.scale(v, -2.5),
            }
        });
        assert!(err < 1e-6, "{op}: {err}");
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[1, 3], &[5., 5., 5.]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1., -1.]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    assert!(tape.layer_norm(x, g, b, 0.0).is_err());
}

#[test]
fn layer_norm_gradient_all_inputs() {
    let mut rng = Rng::new(14);
    let x = random(&[4, 8], &mut rng);
    let gamma = Tensor::from_fn(&[8], |_| rng.uniform(0.5, 1.5));
    let beta = random(&[8], &mut rng);
    let err = check(&x, 7, |tape, v| {
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        tape.layer_norm(v, g, b, 1e-5).unwrap()
    });
    assert!(err < 1e-5, "{err}");
    let err = check(&gamma, 8, |tape, v| {
        let xv = tape.constant(x.clone());
        let b = tape.constant(beta.clone());
        tape.layer_norm(xv, v, b, 1e-5).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(t(&[2], &[1000., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_gradient_along_both_axes() {
    let mut rng = Rng::new(15);
    let x = random(&[7], &mut rng);
    assert!(check(&x, 9, |tape, v| tape.softmax(v, 0).unwrap()) < 1e-5);
    let x = random(&[3, 5], &mut rng);
    assert!(check(&x, 10, |tape, v| tape.softmax(v, 0).unwrap()) < 1e-5);
    assert!(check(&x, 11, |tape, v| tape.softmax(v, 1).unwrap()) < 1e-5);
}

#[test]
fn conv2d_cases() {
    let mut rng = Rng::new(16);
    let img = random(&[2, 4, 5], &mut rng);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(img.clone());
    // 1×1 identity per channel
    let w = tape.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
    let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.value(y), &img);
    // depthwise 3×3 centre tap
    let mut k = vec![0.0; 18];
    k[4] = 1.0;
    k[13] = 1.0;
    let w = tape.constant(t(&[2, 1, 3, 3], &k));
    let y = tape.conv2d(x, w, None, 1, 1, 2).unwrap();
    assert_eq!(tape.value(y), &img);
    // overlap counting
    let ones = tape.constant(Tensor::ones(&[1, 5, 5]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(ones, w, None, 1, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.at(&[0, 2, 2]), 9.0);
    assert_eq!(v.at(&[0, 0, 0]), 4.0);
    assert_eq!(v.at(&[0, 4, 4]), 4.0);
    assert_eq!(v.at(&[0, 0, 2]), 6.0);
    // groups must divide channels
    let w = tape.constant(Tensor::ones(&[3, 1, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1, 2).unwrap_err();
    assert!(matches!(err, patrack_core::Error::Config(_)));
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(17);
    let x = random(&[4, 5, 5], &mut rng);
    let w = random(&[4, 2, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let err = check(&x, 12, |tape, v| {
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        tape.conv2d(v, wv, Some(bv), 1, 1, 2).unwrap()
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&w, 13, |tape, v| {
        let xv = tape.constant(x.clone());
        tape.conv2d(xv, v, None, 2, 1, 2).unwrap()
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&b, 14, |tape, v| {
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        tape.conv2d(xv, wv, Some(v), 1, 1, 2).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pooling_cases() {
    let mut tape = Tape::<f64>::new();
    let checker = Tensor::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
    let x = tape.constant(checker);
    let y = tape.pool2d(x, PoolKind::Max, 3, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 1.0));

    let pm = Tensor::from_fn(&[1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 });
    let x = tape.constant(pm);
    let y = tape.pool2d(x, PoolKind::Avg, 2, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::full(&[2, 6, 6], 3.25));
    let y = tape.pool2d(x, PoolKind::Avg, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[2, 3, 3], 3.25));

    let small = tape.constant(Tensor::zeros(&[1, 2, 2]));
    assert!(tape.pool2d(small, PoolKind::Max, 5, 1, 1).is_err());
}

#[test]
fn pool_and_upsample_gradients() {
    let mut rng = Rng::new(18);
    let x = random(&[2, 4, 6], &mut rng);
    assert!(check(&x, 15, |tape, v| tape.pool2d(v, PoolKind::Max, 3, 1, 1).unwrap()) < 1e-6);
    assert!(check(&x, 16, |tape, v| tape.pool2d(v, PoolKind::Avg, 2, 2, 0).unwrap()) < 1e-6);
    assert!(check(&x, 17, |tape, v| tape.upsample_nearest2d(v, 2).unwrap()) < 1e-6);
}

#[test]
fn upsample_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
    let y = tape.upsample_nearest2d(x, 1).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let y = tape.upsample_nearest2d(x, 2).unwrap();
    assert_eq!(
        tape.value(y).data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
    let c = tape.constant(Tensor::full(&[1, 4, 4], 2.0));
    let p = tape.pool2d(c, PoolKind::Avg, 2, 2, 0).unwrap();
    let u = tape.upsample_nearest2d(p, 2).unwrap();
    assert_eq!(tape.value(u), tape.value(c));
}

#[test]
fn structural_gradients() {
    let mut rng = Rng::new(19);
    let x = random(&[4, 6], &mut rng);
    assert!(check(&x, 18, |tape, v| tape.narrow(v, 1, 3).unwrap()) < 1e-9);
    assert!(check(&x, 19, |tape, v| tape.slice_cols(v, 2, 5).unwrap()) < 1e-9);
    assert!(
        check(&x, 20, |tape, v| {
            let a = tape.slice_cols(v, 0, 2).unwrap();
            let b = tape.slice_cols(v, 3, 6).unwrap();
            tape.concat_cols(&[b, a]).unwrap()
        }) < 1e-9
    );
    assert!(
        check(&x, 21, |tape, v| {
            let a = tape.narrow(v, 0, 1).unwrap();
            tape.concat(&[v, a]).unwrap()
        }) < 1e-9
    );
    assert!(check(&x, 22, |tape, v| tape.gather(v, &[0, 5, 5, 23]).unwrap()) < 1e-9);
    assert!(check(&x, 23, |tape, v| tape.reshape(v, &[2, 12]).unwrap()) < 1e-9);
    let b = random(&[6], &mut rng);
    assert!(check(&b, 24, |tape, v| {
        let xv = tape.constant(x.clone());
        tape.add_row_bias(xv, v).unwrap()
    }) < 1e-9);
}

#[test]
fn focal_loss_gradient() {
    let mut rng = Rng::new(20);
    let z = random(&[4, 4], &mut rng);
    let mut target = Tensor::from_fn(&[4, 4], |_| rng.uniform(0.0, 0.9));
    target.data_mut()[5] = 1.0;
    let err = check(&z, 25, |tape, v| tape.focal_loss(v, &target, 2, 4).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);

    // loss = sum(A·B): dA = 1·Bᵀ, dB = Aᵀ·1
    let a = t(&[2, 2], &[1., 2., 3., 4.]);
    let b = t(&[2, 2], &[5., 6., 7., 8.]);
    let mut tape = Tape::<f64>::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.leaf(b.clone(), false);
    let p = tape.matmul(av, bv).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(av).unwrap().data(), &[11., 15., 11., 15.]);
    assert!(g.get(bv).is_none());
    let fd = finite_diff_gradient(
        |probe| {
            let mut tp = Tape::new();
            let x = tp.constant(probe.clone());
            let y = tp.constant(b.clone());
            let p = tp.matmul(x, y).unwrap();
            tp.value(p).sum()
        },
        &a,
        1e-5,
    );
    assert!(max_relative_error(fd.data(), &[11., 15., 11., 15.], 1e-6).0 < 1e-8);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(
        tape.backward(x),
        Err(patrack_core::Error::Usage(_))
    ));
}

#[test]
fn two_layer_network_agrees_with_finite_differences() {
    let mut rng = Rng::new(21);
    let x = random(&[3, 4], &mut rng);
    let w1 = random(&[4, 6], &mut rng);
    let w2 = random(&[6, 2], &mut rng);
    let err = check(&w1, 26, |tape, v| {
        let xv = tape.constant(x.clone());
        let w2v = tape.constant(w2.clone());
        let h = tape.matmul(xv, v).unwrap();
        let h = tape.gelu(h);
        tape.matmul(h, w2v).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut rng = Rng::new(22);
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(&[8, 16], |_| rng.uniform(-1., 1.) as f32), true);
        let b = tape.constant(Tensor::from_fn(&[16, 8], |_| rng.uniform(-1., 1.) as f32));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        let l = tape.sum(s);
        let out = tape.value(s).clone();
        let g = tape.backward(l).unwrap().get(a).unwrap().clone();
        (out, g)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = v.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[n], v).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn avg_then_upsample_is_identity_on_block_constant(vals in prop::collection::vec(-10.0f64..10.0, 9), c in 1usize..3) {
        let mut data = Vec::new();
        for ch in 0..c {
            for y in 0..6 {
                for x in 0..6 {
                    data.push(vals[(y / 2) * 3 + x / 2] + ch as f64);
                }
            }
        }
        let map = Tensor::new(&[c, 6, 6], data).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(map.clone());
        let p = tape.pool2d(x, PoolKind::Avg, 2, 2, 0).unwrap();
        let u = tape.upsample_nearest2d(p, 2).unwrap();
        prop_assert_eq!(tape.value(u), &map);
    }

    #[test]
    fn random_ops_match_finite_differences(seed in 0u64..20) {
        let mut rng = Rng::new(seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 4], &mut rng);
        let g = Tensor::from_fn(&[4], |_| rng.uniform(0.5, 1.5));
        let err = check(&x, seed, |tape, v| {
            let wv = tape.constant(w.clone());
            let gv = tape.constant(g.clone());
            let bv = tape.constant(Tensor::zeros(&[4]));
            let h = tape.matmul(v, wv).unwrap();
            let h = tape.layer_norm(h, gv, bv, 1e-5).unwrap();
            let h = tape.gelu(h);
            tape.softmax(h, 1).unwrap()
        });
        prop_assert!(err < 1e-4, "{}", err);
    }
}
