use std::collections::BTreeMap;

use l2a_ot::nets::{Binding, DomainCode, GeneratorSpec, GeneratorWeights, Weights};
use l2a_ot::tensor::{execute, grad_check, GradCheckOptions, Graph, Session, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feed(pairs: &[(&str, &Tensor)]) -> BTreeMap<String, Tensor> {
    pairs.iter().map(|(k, v)| (k.to_string(), (*v).clone())).collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_out(g: &mut Graph, x_shape: &[usize], w: &Tensor, stride: usize, pad: usize) -> Graph {
    let x = g.input("x", x_shape);
    let wv = g.input("w", w.shape());
    let y = g.conv2d(x, wv, None, stride, pad).unwrap();
    g.mark_output("y", y);
    std::mem::take(g)
}

/// Direct loop over output pixel, out channel, in channel and kernel taps.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

#[test]
fn identity_kernel_and_shape_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let id = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let g = conv_out(&mut Graph::new(), &[1, 1, 4, 4], &id, 1, 0);
    let out = execute(&g, &feed(&[("x", &x), ("w", &id)])).unwrap();
    assert!(out["y"].bit_eq(&x));

    let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
    let g = conv_out(&mut Graph::new(), &[1, 1, 4, 4], &ones, 2, 1);
    let out = execute(&g, &feed(&[("x", &Tensor::full(&[1, 1, 4, 4], 1.0)), ("w", &ones)])).unwrap();
    assert_eq!(out["y"].shape(), &[1, 1, 2, 2]);
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let g = conv_out(&mut Graph::new(), x.shape(), &w, stride, pad);
        let out = execute(&g, &feed(&[("x", &x), ("w", &w)])).unwrap();
        let want = naive_conv(&x, &w, stride, pad);
        assert!(out["y"].max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, stride, pad, op) in [(5, 2, 1, 0), (6, 2, 1, 1), (4, 1, 1, 0)] {
        let x = random(&mut rng, &[2, 3, h, h]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let mut g = Graph::new();
        let xv = g.input("x", x.shape());
        let wv = g.input("w", w.shape());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        g.mark_output("y", y);
        let y_shape = g.shape(y).to_vec();
        let yv = g.input("u", &y_shape);
        let back = g.conv_transpose2d(yv, wv, None, stride, pad, op).unwrap();
        g.mark_output("back", back);
        assert_eq!(g.shape(back), x.shape());
        let u = random(&mut rng, &y_shape);
        let out = execute(&g, &feed(&[("x", &x), ("w", &w), ("u", &u)])).unwrap();
        let lhs = out["y"].dot(&u);
        let rhs = x.dot(&out["back"]);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn transposed_conv_identity_and_shape() {
    let mut g = Graph::new();
    let x = g.input("x", &[1, 2, 3, 3]);
    let w = g.input("w", &[2, 2, 1, 1]);
    let y = g.conv_transpose2d(x, w, None, 1, 0, 0).unwrap();
    g.mark_output("y", y);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = random(&mut rng, &[1, 2, 3, 3]);
    let id = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = execute(&g, &feed(&[("x", &xt), ("w", &id)])).unwrap();
    assert!(out["y"].bit_eq(&xt));

    let mut g = Graph::new();
    let x = g.input("x", &[1, 1, 2, 2]);
    let w = g.input("w", &[1, 1, 3, 3]);
    let y = g.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
}

#[test]
fn max_pool_values_and_tie_break() {
    let mut g = Graph::new();
    let x = g.input_with_grad("x", &[1, 1, 2, 2]);
    let p = g.max_pool2x2(x).unwrap();
    let s = g.sum(p);
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[(
        "x",
        &Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    )]))
    .unwrap();
    assert_eq!(sess.value(p).unwrap().data(), &[4.0]);

    let mut sess = Session::new(&g);
    sess.forward(&feed(&[(
        "x",
        &Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap(),
    )]))
    .unwrap();
    assert_eq!(
        sess.backward(s).unwrap().input("x").unwrap().data(),
        &[1.0, 0.0, 0.0, 0.0]
    );

    let mut g = Graph::new();
    let x = g.input("x", &[1, 2, 4, 6]);
    let p = g.max_pool2x2(x).unwrap();
    g.mark_output("p", p);
    let out = execute(&g, &feed(&[("x", &Tensor::full(&[1, 2, 4, 6], -0.7))])).unwrap();
    assert_eq!(out["p"].shape(), &[1, 2, 2, 3]);
    assert!(out["p"].data().iter().all(|&v| v == -0.7));
}

#[test]
fn instance_norm_fixed_points() {
    let mut g = Graph::new();
    let x = g.input("x", &[1, 2, 2, 2]);
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = g.instance_norm(x, gain, bias, 1e-12).unwrap();
    g.mark_output("y", y);
    // channel 0 constant, channel 1 already zero-mean unit-variance
    let xt = Tensor::new(&[1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
    let out = execute(&g, &feed(&[("x", &xt)])).unwrap();
    let y = out["y"].data();
    assert!(y[..4].iter().all(|&v| v == 0.0));
    for (a, b) in y[4..].iter().zip(&xt.data()[4..]) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn softmax_cross_entropy_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.input_with_grad("x", &[2, 10]);
    let loss = g.softmax_cross_entropy(x, &[3, 7]).unwrap();
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("x", &Tensor::zeros(&[2, 10]))])).unwrap();
    assert!((sess.value(loss).unwrap().item() - 10f64.ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 20];
    sharp[3] = 50.0;
    sharp[17] = 50.0;
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("x", &Tensor::new(&[2, 10], sharp).unwrap())]))
        .unwrap();
    assert!(sess.value(loss).unwrap().item() < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, &[2, 10]);
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("x", &logits)])).unwrap();
    let grad = sess.backward(loss).unwrap().input("x").unwrap().clone();
    for (row, &label) in [3usize, 7].iter().enumerate() {
        let z = &logits.data()[row * 10..(row + 1) * 10];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for c in 0..10 {
            let p = (z[c] - m).exp() / denom;
            let want = (p - if c == label { 1.0 } else { 0.0 }) / 2.0;
            assert!((grad.data()[row * 10 + c] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let mut g = Graph::new();
    let x = g.input("x", &[3, 10]);
    let loss = g.softmax_cross_entropy(x, &[0, 5, 9]).unwrap();
    g.mark_output("loss", loss);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random(&mut rng, &[3, 10]);
    let shifted = z.map(|v| v + 700.0);
    let a = execute(&g, &feed(&[("x", &z)])).unwrap()["loss"].item();
    let b = execute(&g, &feed(&[("x", &shifted)])).unwrap()["loss"].item();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn l1_values_and_gradient() {
    let mut g = Graph::new();
    let a = g.input_with_grad("a", &[2]);
    let b = g.input("b", &[2]);
    let loss = g.l1_loss(a, b).unwrap();
    let at = Tensor::from_vec(vec![1.0, 3.0]);
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("a", &at), ("b", &at)])).unwrap();
    assert_eq!(sess.value(loss).unwrap().item(), 0.0);
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("a", &at), ("b", &Tensor::from_vec(vec![0.0, 4.0]))]))
        .unwrap();
    assert_eq!(sess.value(loss).unwrap().item(), 1.0);
    assert_eq!(sess.backward(loss).unwrap().input("a").unwrap().data(), &[0.5, -0.5]);
    let mut sess = Session::new(&g);
    sess.forward(&feed(&[("a", &at), ("b", &Tensor::from_vec(vec![0.0, 1.0]))]))
        .unwrap();
    assert_eq!(sess.value(loss).unwrap().item(), 1.5);
}

#[test]
fn repeated_execution_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let mut g = Graph::new();
    let xv = g.input("x", x.shape());
    let wv = g.param("w", &w);
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = g.tanh(y);
    g.mark_output("y", y);
    let inputs = feed(&[("x", &x)]);
    let a = execute(&g, &inputs).unwrap();
    let b = execute(&g, &inputs).unwrap();
    assert!(a["y"].bit_eq(&b["y"]));
}

#[test]
fn grad_check_on_linear_relu_and_generator() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let x = g.input_with_grad("x", &[3, 4]);
    let w = g.param("w", &random(&mut rng, &[4, 2]).with_requires_grad(true));
    let b = g.param("b", &random(&mut rng, &[2]).with_requires_grad(true));
    let y = g.linear(x, w, b).unwrap();
    let loss = g.sum(y);
    let rep = grad_check(
        &g,
        loss,
        &feed(&[("x", &random(&mut rng, &[3, 4]))]),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed);
    assert!(rep.max_rel_error() < 1e-8, "{}", rep.max_rel_error());

    let mut g = Graph::new();
    let x = g.input_with_grad("x", &[8]);
    let r = g.relu(x);
    let sq = g.mul(r, r).unwrap();
    let loss = g.sum(sq);
    let away: Vec<f64> = (0..8)
        .map(|i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 })
        .collect();
    let rep = grad_check(
        &g,
        loss,
        &feed(&[("x", &Tensor::from_vec(away))]),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed);

    let spec = GeneratorSpec {
        image_channels: 3,
        num_domains: 3,
        widths: [2, 2, 3],
    };
    let mut gen = GeneratorWeights::init(&spec, 9);
    let out_w = gen.params().get("out.w").unwrap().clone();
    *gen.params_mut()
        .iter_mut()
        .find(|(k, _)| k.as_str() == "out.w")
        .unwrap()
        .1 = random(&mut rng, out_w.shape());
    let mut g = Graph::new();
    let xv = g.input("x", &[2, 3, 8, 8]);
    let codes = vec![DomainCode::new(1, 3).unwrap(), DomainCode::new(2, 3).unwrap()];
    let y = gen.forward(&mut g, &Binding::trainable("g."), xv, &codes).unwrap();
    let target = g.constant(random(&mut rng, &[2, 3, 8, 8]).map(|v| v * 2.0));
    let loss = g.l1_loss(y, target).unwrap();
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let rep = grad_check(&g, loss, &feed(&[("x", &x)]), &GradCheckOptions::default()).unwrap();
    assert!(
        rep.passed,
        "{:?}",
        rep.entries
            .iter()
            .filter(|e| e.max_rel_error > 1e-4)
            .collect::<Vec<_>>()
    );
    assert!(rep.entries.len() >= 20);
}
