use super::gradcheck::{self, rng, uniform};
use super::ops::{concat, ArcTanSurrogate};
use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn adding_zero_is_identity() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2, 2], &[1.0, -2.0, 3.5, 0.25]), true);
    let z = tape.constant(Tensor::zeros([2, 2]));
    let y = x.add(z).unwrap();
    assert_eq!(*y.value(), *x.value());
}

#[test]
fn scaling_by_two_has_gradient_two() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
    let y = x.scale(2.0).sum_all();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn product_gradient_is_other_factor() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[3.0, -1.0]), true);
    let y = tape.leaf(t64(&[2], &[0.5, 4.0]), true);
    tape.backward(x.mul(y).unwrap().sum_all()).unwrap();
    assert_eq!(x.grad().unwrap().data(), y.value().data());
    assert_eq!(y.grad().unwrap().data(), x.value().data());
}

#[test]
fn reused_subexpression_sums_path_contributions() {
    // f = a*b + a*c with b = 2a, c = a + 1  =>  f = 2a^2 + a^2 + a
    // df/da = 6a + 1.
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::scalar(1.5), true);
    let b = a.scale(2.0);
    let c = a.add_scalar(1.0);
    let f = a.mul(b).unwrap().add(a.mul(c).unwrap()).unwrap();
    tape.backward(f).unwrap();
    assert!((a.grad().unwrap().item().unwrap() - 10.0).abs() < 1e-12);
}

#[test]
fn two_consumers_accumulate_linearly() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[0.3, -0.7]), true);
    let y1 = x.scale(3.0).sum_all();
    let y2 = x.mul(x).unwrap().sum_all();
    tape.backward(y1.add(y2).unwrap()).unwrap();
    let g = x.grad().unwrap();
    assert!((g.data()[0] - (3.0 + 0.6)).abs() < 1e-12);
    assert!((g.data()[1] - (3.0 - 1.4)).abs() < 1e-12);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
    let err = tape.backward(x.scale(2.0)).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([3, 2]));
    assert!(matches!(a.add(b), Err(Error::Shape(_))));
    assert!(matches!(a.matmul(a), Err(Error::Shape(_))));
    assert!(matches!(a.mean_axis(2), Err(Error::Shape(_))));
}

#[test]
fn matmul_hand_cases() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(a.matmul(eye).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eye.matmul(a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let b = tape.constant(t64(&[2, 3], &[1.0, 0.0, -1.0, 2.0, 1.0, 0.5]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 3]);
    assert_eq!(c.value().data(), &[5.0, 2.0, 0.0, 11.0, 4.0, -1.0]);
}

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * cin + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_six_loop_reference() {
    for seed in 0..20 {
        let mut r = rng(seed, 99);
        use rand::Rng;
        let (b, cin, cout) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
        let k = r.random_range(1..4);
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        let (h, w) = (r.random_range(k..8), r.random_range(k..8));
        let x = uniform(&mut r, &[b, cin, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let bias: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(
                tape.constant(wt.clone()),
                Some(tape.constant(t64(&[cout], &bias))),
                ConvSpec::new(stride, pad),
            )
            .unwrap();
        let expect = naive_conv(&x, &wt, &bias, stride, pad);
        assert!(y.value().max_abs_diff(&expect).unwrap() < 1e-12, "seed {seed}");
    }
}

#[test]
fn conv2d_special_kernels() {
    let tape = Tape::<f64>::new();
    let x = Tensor::from_fn([1, 2, 3, 3], |i| i as f64);
    // 1x1 kernel mixes channels pointwise.
    let w = t64(&[1, 2, 1, 1], &[2.0, -1.0]);
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(w), None, ConvSpec::new(1, 0))
        .unwrap();
    for p in 0..9 {
        assert_eq!(y.value().data()[p], 2.0 * x.data()[p] - x.data()[9 + p]);
    }
    // Centered delta kernel with padding 1 reproduces each channel.
    let mut delta = Tensor::zeros([2, 2, 3, 3]);
    delta.data_mut()[4] = 1.0;
    delta.data_mut()[27 + 4] = 1.0;
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(delta), None, ConvSpec::new(1, 1))
        .unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn mean_over_constant_axis_is_constant() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([3, 4, 2], 1.75));
    for axis in 0..3 {
        let m = x.mean_axis(axis).unwrap();
        assert!(m.value().data().iter().all(|&v| v == 1.75));
    }
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut r = rng(7, 7);
    let tape = Tape::<f64>::new();
    let x = tape.constant(uniform(&mut r, &[5, 7], -2.0, 2.0));
    let y = x.l2_normalize(1, 1e-12).unwrap();
    for row in y.value().data().chunks(7) {
        let dot: f64 = row.iter().map(|v| v * v).sum();
        assert!((dot - 1.0).abs() < 1e-12);
    }
    // Zero rows stay finite under the eps guard.
    let z = tape.constant(Tensor::zeros([1, 3])).l2_normalize(1, 1e-12).unwrap();
    assert!(z.value().data().iter().all(|v| v.is_finite()));
}

#[test]
fn concat_then_narrow_round_trips() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
    let b = tape.constant(Tensor::from_fn([2, 1, 2], |i| 100.0 + i as f64));
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.shape(), vec![2, 4, 2]);
    assert_eq!(*c.narrow(1, 0, 3).unwrap().value(), *a.value());
    assert_eq!(*c.narrow(1, 3, 1).unwrap().value(), *b.value());
}

#[test]
fn cross_entropy_symmetry_cases() {
    let tape = Tape::<f64>::new();
    for k in [2usize, 3, 10] {
        let x = tape.constant(Tensor::full([1, k], 0.37));
        let l = x.cross_entropy(&[0]).unwrap().value().item().unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-14);
    }
    let x = tape.constant(Tensor::zeros([1, 3]));
    assert!(matches!(x.cross_entropy(&[3]), Err(Error::Validation(_))));
}

#[test]
fn cross_entropy_matches_direct_softmax_and_is_shift_invariant() {
    use rand::Rng;
    for seed in 0..30 {
        let mut r = rng(seed, 5);
        let (rows, k) = (r.random_range(1..6), r.random_range(2..9));
        let x = uniform(&mut r, &[rows, k], -5.0, 5.0);
        let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
        let mut expect = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x.data()[i * k..][..k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[t].exp() / z).ln();
        }
        expect /= rows as f64;
        let tape = Tape::new();
        let l = tape.constant(x.clone()).cross_entropy(&targets).unwrap();
        assert!((l.value().item().unwrap() - expect).abs() < 1e-12);
        let shift = r.random_range(-50.0..50.0);
        let l2 = tape
            .constant(x.map(|v| v + shift))
            .cross_entropy(&targets)
            .unwrap();
        assert!((l2.value().item().unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn spike_forward_is_binary_and_backward_is_surrogate() {
    let tape = Tape::<f64>::new();
    let thr = 0.8;
    let v = tape.leaf(t64(&[3], &[thr + 1.0, thr - 1.0, thr]), true);
    let s = v.spike(thr);
    assert_eq!(s.value().data(), &[1.0, 0.0, 1.0]);
    tape.backward(s.sum_all()).unwrap();
    let g = v.grad().unwrap();
    let sg = ArcTanSurrogate::default();
    assert_eq!(g.data()[2], 1.0, "peak of a/2 with a = 2");
    for (i, u) in [1.0, -1.0].iter().enumerate() {
        let z = std::f64::consts::PI * u;
        assert!((g.data()[i] - 2.0 / (2.0 * (1.0 + z * z))).abs() < 1e-15);
        assert!((g.data()[i] - sg.derivative(*u)).abs() < 1e-15);
    }
}

#[test]
fn detach_cuts_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let y = x.mul(x.detach()).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().item().unwrap(), 2.0);
}

#[test]
fn gradcheck_suite_passes_on_every_op() {
    for case in gradcheck::tensor_cases() {
        let rep = gradcheck::run_case(&case, 20).unwrap();
        assert!(rep.passed(1e-4), "{} max rel err {}", rep.name, rep.max_rel_error);
    }
}
