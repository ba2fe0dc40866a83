use super::nn::{flatten, linear, total_variation};
use super::*;
use crate::error::Error;
use crate::rng::{derive_stream, Stream};

fn random(shape: &[usize], s: &mut Stream) -> Tensor {
    Tensor::from_fn(shape, |_| s.uniform_range(-1.0, 1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Direct six-loop cross-correlation.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c + ic) * kh + dy) * kw + dx;
                                acc += x.data()[xi] * k.data()[ki];
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = x.conv2d(&k, 1, 0).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut s = derive_stream(0, "conv-id", 0);
    let tape = Tape::new();
    let xv = random(&[2, 1, 5, 4], &mut s);
    let x = tape.constant(xv.clone());
    let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    assert_eq!(x.conv2d(&k, 1, 0).unwrap().value(), xv);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut s = derive_stream(0, "conv-oracle", 0);
    for (xs, ks, stride, pad) in [
        ([1, 1, 4, 4], [1, 1, 3, 3], 1, 0),
        ([2, 3, 7, 6], [4, 3, 3, 3], 2, 1),
        ([1, 2, 5, 5], [3, 2, 5, 5], 1, 2),
    ] {
        let xv = random(&xs, &mut s);
        let kv = random(&ks, &mut s);
        let tape = Tape::new();
        let y = tape
            .constant(xv.clone())
            .conv2d(&tape.constant(kv.clone()), stride, pad)
            .unwrap()
            .value();
        let want = conv_oracle(&xv, &kv, stride, pad);
        assert_eq!(y.shape(), want.shape());
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let wrong_channels = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(x.conv2d(&wrong_channels, 1, 0), Err(Error::Shape { .. })));
    let too_big = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(matches!(x.conv2d(&too_big, 1, 0), Err(Error::Shape { .. })));
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(&ones).unwrap().value().data(), &[3.0, 7.0]);
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
    assert!(matches!(a.matmul(&tape.constant(Tensor::zeros(&[3, 1]))), Err(Error::Shape { .. })));
}

#[test]
fn matmul_matches_loop_oracle() {
    let mut s = derive_stream(0, "matmul", 0);
    let (av, bv) = (random(&[5, 7], &mut s), random(&[7, 3], &mut s));
    let tape = Tape::new();
    let c = tape
        .constant(av.clone())
        .matmul(&tape.constant(bv.clone()))
        .unwrap()
        .value();
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0;
            for p in 0..7 {
                acc += av.data()[i * 7 + p] * bv.data()[p * 3 + j];
            }
            assert!((c.data()[i * 3 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn activation_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    assert_eq!(activation(Activation::Relu, &x).unwrap().value().data(), &[0.0, 2.0]);
    assert_eq!(tape.scalar(0.0).tanh().unwrap().item(), 0.0);
    let err = check_gradient(|x| x.tanh()?.sum(), &Tensor::scalar(0.0), 1e-5).unwrap();
    assert!(err < 1e-9);
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0));
    let g = tape.grad(&x.tanh().unwrap(), &[&x]).unwrap();
    assert_eq!(g[0].item(), 1.0);
}

#[test]
fn relu_kink_takes_zero_side() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(0.0));
    let g = tape.grad(&x.relu().unwrap(), &[&x]).unwrap();
    assert_eq!(g[0].item(), 0.0);
}

#[test]
fn pool_examples() {
    let tape = Tape::new();
    let x = tape.var(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let avg = pool2d(PoolKind::Avg, &x, 2, 2).unwrap();
    assert_eq!(avg.item(), 2.5);
    assert_eq!(pool2d(PoolKind::Max, &x, 2, 2).unwrap().item(), 4.0);
    let g = tape.grad(&avg, &[&x]).unwrap()[0].value();
    assert_eq!(g.data(), &[0.25; 4]);
    let err = check_gradient(
        |x| pool2d(PoolKind::Avg, x, 2, 2)?.sum(),
        &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9);
    assert!(matches!(pool2d(PoolKind::Avg, &x, 3, 1), Err(Error::Shape { .. })));
}

#[test]
fn max_pool_ties_route_to_first() {
    let tape = Tape::new();
    let x = tape.var(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
    let y = pool2d(PoolKind::Max, &x, 2, 2).unwrap();
    let g = tape.grad(&y, &[&x]).unwrap()[0].value();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 10]));
    let loss = softmax_cross_entropy(&uniform, &[3]).unwrap().item();
    assert!((loss - 10f64.ln()).abs() < 1e-12);

    let mut logits = Tensor::zeros(&[1, 10]);
    logits.data_mut()[2] = 50.0;
    let loss = softmax_cross_entropy(&tape.constant(logits), &[2]).unwrap().item();
    assert!(loss < 1e-6);

    assert!(matches!(
        softmax_cross_entropy(&uniform, &[10]),
        Err(Error::LabelOutOfRange { label: 10, classes: 10 })
    ));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut s = derive_stream(0, "ce", 0);
    let z = Tensor::from_fn(&[4, 3], |_| s.uniform_range(-3.0, 3.0));
    let labels = [0, 2, 1, 2];
    let tape = Tape::new();
    let got = softmax_cross_entropy(&tape.constant(z.clone()), &labels)
        .unwrap()
        .item();
    let mut want = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &z.data()[r * 3..r * 3 + 3];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - row[label];
    }
    want /= 4.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn first_and_second_derivatives() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap();
    assert_eq!(tape.grad(&y, &[&x]).unwrap()[0].item(), 6.0);

    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0));
    let cube = x.mul(&x).unwrap().mul(&x).unwrap();
    let dx = tape.grad(&cube, &[&x]).unwrap().remove(0);
    assert_eq!(dx.item(), 12.0);
    let ddx = tape.grad(&dx, &[&x]).unwrap().remove(0);
    assert_eq!(ddx.item(), 12.0);
}

#[test]
fn unreachable_target_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(1.0));
    let z = tape.var(Tensor::full(&[3], 1.0));
    let y = x.square().unwrap();
    let g = tape.grad(&y, &[&z]).unwrap();
    assert_eq!(g[0].value().data(), &[0.0; 3]);
}

#[test]
fn foreign_tape_is_rejected() {
    let a = Tape::new();
    let b = Tape::new();
    let x = a.var(Tensor::scalar(1.0));
    let y = b.var(Tensor::scalar(1.0));
    assert!(matches!(x.add(&y), Err(Error::ForeignTape)));
    let loss = x.square().unwrap();
    assert!(matches!(a.grad(&loss, &[&y]), Err(Error::ForeignTape)));
}

#[test]
fn non_finite_is_surfaced() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    assert!(matches!(zero.ln(), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn checker_on_quadratic_and_wrong_gradient() {
    let mut s = derive_stream(0, "quad", 0);
    let a = random(&[4, 4], &mut s);
    let point = Tensor::from_fn(&[4], |_| s.uniform_range(0.5, 1.5));
    let quad = |x: &Var| -> crate::Result<Var> {
        let m = x.tape().constant(a.clone());
        let col = x.reshape(&[4, 1])?;
        col.transpose()?.matmul(&m.matmul(&col)?)?.sum()
    };
    assert!(check_gradient(quad, &point, 1e-5).unwrap() < 1e-8);

    let sq = |x: &Var| x.square()?.sum();
    let doubled: Vec<f64> = point.data().iter().map(|v| 4.0 * v).collect();
    let err = check_against(&sq, &point, &doubled, 1e-5).unwrap();
    assert!((err - 1.0).abs() < 1e-6, "{err}");
}

fn two_layer_loss(w1: &Var, w2: &Var, x: &Tensor, labels: &[usize]) -> crate::Result<Var> {
    let tape = w1.tape();
    let h = tape.constant(x.clone()).matmul(w1)?.tanh()?;
    softmax_cross_entropy(&h.matmul(w2)?, labels)
}

#[test]
fn hessian_vector_product_matches_finite_differences() {
    let mut s = derive_stream(0, "hvp", 0);
    let x = random(&[3, 4], &mut s);
    let labels = [0, 2, 1];
    let w1v = random(&[4, 5], &mut s);
    let w2v = random(&[5, 3], &mut s);
    let v1 = random(&[4, 5], &mut s);
    let v2 = random(&[5, 3], &mut s);

    let grads_at = |a: &Tensor, b: &Tensor| -> (Tensor, Tensor) {
        let tape = Tape::new();
        let w1 = tape.var(a.clone());
        let w2 = tape.var(b.clone());
        let loss = two_layer_loss(&w1, &w2, &x, &labels).unwrap();
        let g = tape.grad(&loss, &[&w1, &w2]).unwrap();
        (g[0].value(), g[1].value())
    };

    let tape = Tape::new();
    let w1 = tape.var(w1v.clone());
    let w2 = tape.var(w2v.clone());
    let loss = two_layer_loss(&w1, &w2, &x, &labels).unwrap();
    let g = tape.grad(&loss, &[&w1, &w2]).unwrap();
    let gv = g[0]
        .dot(&tape.constant(v1.clone()))
        .unwrap()
        .add(&g[1].dot(&tape.constant(v2.clone())).unwrap())
        .unwrap();
    let hv = tape.grad(&gv, &[&w1, &w2]).unwrap();

    let eps = 1e-5;
    let shift = |w: &Tensor, v: &Tensor, c: f64| {
        Tensor::new(
            w.shape().to_vec(),
            w.data().iter().zip(v.data()).map(|(a, b)| a + c * b).collect(),
        )
        .unwrap()
    };
    let (p1, p2) = grads_at(&shift(&w1v, &v1, eps), &shift(&w2v, &v2, eps));
    let (m1, m2) = grads_at(&shift(&w1v, &v1, -eps), &shift(&w2v, &v2, -eps));
    for (analytic, (p, m)) in hv.iter().zip([(p1, m1), (p2, m2)]) {
        let a = analytic.value();
        let numeric: Vec<f64> = p
            .data()
            .iter()
            .zip(m.data())
            .map(|(p, m)| (p - m) / (2.0 * eps))
            .collect();
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        assert!(err / scale < 1e-5, "relative HVP error {}", err / scale);
    }
}

// Each primitive, checked at 20 random points away from kinks.
type Probe = (&'static str, Vec<usize>, Box<dyn Fn(&Var) -> crate::Result<Var>>);

fn primitive_probes(s: &mut Stream) -> Vec<Probe> {
    let other = random(&[2, 3], s);
    let kernel = random(&[2, 2, 3, 3], s);
    let mat = random(&[3, 5], s);
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other.clone();
    let m1 = mat.clone();
    let k1 = kernel.clone();

    vec![
        ("add", vec![2, 3], Box::new(move |x: &Var| x.add(&x.tape().constant(o1.clone()))?.square()?.sum())),
        ("sub", vec![2, 3], Box::new(move |x: &Var| x.sub(&x.tape().constant(o2.clone()))?.square()?.sum())),
        ("mul", vec![2, 3], Box::new(move |x: &Var| x.mul(&x.tape().constant(o3.clone()))?.mul(x)?.sum())),
        ("div", vec![2, 3], Box::new(move |x: &Var| {
            x.tape().constant(o4.clone()).div(&x.square()?.offset(1.0)?)?.sum()
        })),
        ("scale", vec![2, 3], Box::new(|x: &Var| x.scale(-2.5)?.square()?.sum())),
        ("exp", vec![2, 3], Box::new(|x: &Var| x.exp()?.sum())),
        ("log", vec![2, 3], Box::new(|x: &Var| x.square()?.offset(0.5)?.ln()?.sum())),
        ("tanh", vec![2, 3], Box::new(|x: &Var| x.tanh()?.square()?.sum())),
        ("sigmoid", vec![2, 3], Box::new(|x: &Var| x.sigmoid()?.square()?.sum())),
        ("sqrt", vec![2, 3], Box::new(|x: &Var| x.square()?.offset(0.1)?.sqrt()?.sum())),
        ("relu", vec![2, 3], Box::new(|x: &Var| x.relu()?.square()?.sum())),
        ("matmul", vec![2, 3], Box::new(move |x: &Var| x.matmul(&x.tape().constant(m1.clone()))?.tanh()?.sum())),
        ("transpose", vec![2, 3], Box::new(|x: &Var| x.transpose()?.matmul(x)?.sum())),
        ("conv_input", vec![1, 2, 5, 5], Box::new(move |x: &Var| {
            x.conv2d(&x.tape().constant(k1.clone()), 1, 1)?.tanh()?.sum()
        })),
        ("conv_kernel", vec![2, 2, 3, 3], Box::new(move |k: &Var| {
            let input = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
            k.tape().constant(input).conv2d(k, 2, 0)?.tanh()?.sum()
        })),
        ("conv_second_order", vec![2, 2, 3, 3], Box::new(move |k: &Var| {
            // gradient of an inner conv loss w.r.t. its input, used as a new loss
            let tape = k.tape();
            let input = tape.var(Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 3 % 7) as f64 - 3.0) / 3.0));
            let inner = input.conv2d(k, 1, 0)?.tanh()?.sum()?;
            let gx = tape.grad(&inner, &[&input])?.remove(0);
            gx.square()?.sum()
        })),
        ("avg_pool", vec![1, 2, 4, 4], Box::new(|x: &Var| pool2d(PoolKind::Avg, x, 2, 2)?.square()?.sum())),
        ("max_pool", vec![1, 2, 4, 4], Box::new(|x: &Var| pool2d(PoolKind::Max, x, 2, 2)?.square()?.sum())),
        ("cross_entropy", vec![2, 3], Box::new(|x: &Var| softmax_cross_entropy(x, &[1, 2]))),
        ("total_variation", vec![1, 1, 3, 3], Box::new(|x: &Var| total_variation(x, 1e-8))),
        ("axis_map", vec![1, 1, 3, 3], Box::new(move |x: &Var| {
            x.axis_map(2, mat.clone().reshape(&[5, 3]).unwrap())?.square()?.sum()
        })),
        ("clamp", vec![2, 3], Box::new(|x: &Var| x.clamp(-2.0, 2.0)?.square()?.sum())),
        ("linear", vec![2, 3], Box::new(move |x: &Var| {
            let tape = x.tape();
            let w = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
            let b = tape.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
            linear(x, &w, &b)?.tanh()?.sum()
        })),
        ("flatten", vec![1, 2, 2, 2], Box::new(|x: &Var| flatten(x)?.square()?.sum())),
        ("slice_cols", vec![2, 3], Box::new(|x: &Var| x.slice_cols(1, 3)?.exp()?.sum())),
    ]
}

fn near_kink(name: &str, p: &Tensor) -> bool {
    match name {
        "relu" => p.data().iter().any(|v| v.abs() < 1e-3),
        // near-ties inside a pooling window, or flat neighbourhoods under the
        // total-variation square root
        "max_pool" | "total_variation" => {
            let d = p.data();
            (0..d.len()).any(|i| (i + 1..d.len()).any(|j| (d[i] - d[j]).abs() < 1e-3))
        }
        "clamp" => p.data().iter().any(|v| (v.abs() - 2.0).abs() < 1e-3),
        _ => false,
    }
}

#[test]
fn every_primitive_passes_finite_difference_checks() {
    let mut s = derive_stream(11, "probes", 0);
    for (name, shape, f) in primitive_probes(&mut s) {
        let mut checked = 0;
        let mut point_stream = derive_stream(11, name, 0);
        while checked < 20 {
            let p = Tensor::from_fn(&shape, |_| point_stream.uniform_range(-1.5, 1.5));
            if near_kink(name, &p) {
                continue;
            }
            let err = check_gradient(&f, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
            checked += 1;
        }
    }
}

#[test]
fn second_order_contraction_matches_finite_differences() {
    let f = |x: &Var| -> crate::Result<Var> {
        let tape = x.tape();
        let k = tape.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).cos()));
        let h = x.conv2d(&k, 1, 1)?.tanh()?;
        let p = pool2d(PoolKind::Avg, &h, 2, 2)?;
        let logits = flatten(&p)?;
        softmax_cross_entropy(&logits, &[3])
    };
    let mut s = derive_stream(5, "second-order", 0);
    for _ in 0..20 {
        let point = Tensor::from_fn(&[1, 1, 4, 4], |_| s.uniform_range(-1.0, 1.0));
        let v = Tensor::from_fn(&[1, 1, 4, 4], |_| s.uniform_range(-1.0, 1.0));

        let tape = Tape::new();
        let x = tape.var(point.clone());
        let g = tape.grad(&f(&x).unwrap(), &[&x]).unwrap().remove(0);
        let gv = g.dot(&tape.constant(v.clone())).unwrap();
        let hv = tape.grad(&gv, &[&x]).unwrap().remove(0).value();

        // d/dx <grad f(x), v> is checked against differences of <grad f, v>.
        let gv_fn = |y: &Var| -> crate::Result<Var> {
            let tape = y.tape();
            let leaf = tape.var(y.value());
            let g = tape.grad(&f(&leaf)?, &[&leaf])?.remove(0);
            g.dot(&tape.constant(v.clone()))
        };
        let err = check_against(&gv_fn, &point, hv.data(), 1e-5).unwrap();
        assert!(err < 1e-4, "second-order error {err}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut s = derive_stream(9, "det", 0);
        let tape = Tape::new();
        let x = tape.var(random(&[2, 1, 6, 6], &mut s));
        let k = tape.var(random(&[3, 1, 3, 3], &mut s));
        let y = x.conv2d(&k, 1, 0).unwrap().tanh().unwrap().sum().unwrap();
        let g = tape.grad(&y, &[&x, &k]).unwrap();
        (y.item().to_bits(), g[0].value(), g[1].value())
    };
    assert_eq!(run(), run());
}
