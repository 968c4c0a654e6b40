use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(tape: &mut Tape, x: Tensor, f: impl Fn(&mut Tape, Var) -> crate::Result<Var>) -> Tensor {
    let v = tape.leaf(x).unwrap();
    let y = f(tape, v).unwrap();
    tape.value(y).clone()
}

/// Contracts `f(x)` with fixed random weights and compares the tape gradient
/// against central differences.
fn check_gradient(x: Tensor, f: impl Fn(&mut Tape, Var) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut t = Tape::new();
        eval(&mut t, x.clone(), &f)
    };
    let weights = random(probe.shape(), &mut rng);
    let loss = |x: Tensor| -> f64 {
        let mut t = Tape::new();
        let y = eval(&mut t, x, &f);
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone()).unwrap();
    let y = f(&mut tape, xv).unwrap();
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(y, w).unwrap();
    let l = tape.reduce_sum(prod).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()]);

    let h = 1e-5;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(plus) - loss(minus)) / (2.0 * h);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (numeric - analytic[i]).abs() / denom;
        assert!(rel < 1e-4, "element {i}: numeric {numeric} vs tape {}", analytic[i]);
    }
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut t = Tape::new();
    let y = eval(&mut t, Tensor::from_vec(vec![0.0, 0.0]), |t, x| t.softmax(x, 0));
    assert_eq!(y.data(), &[0.5, 0.5]);

    let base = eval(&mut t, Tensor::from_vec(vec![0.3, -1.2]), |t, x| t.softmax(x, 0));
    let shifted = eval(&mut t, Tensor::from_vec(vec![0.3 + 40.0, -1.2 + 40.0]), |t, x| t.softmax(x, 0));
    assert!(base.max_abs_diff(&shifted) < 1e-15);
}

#[test]
fn softmax_matches_direct_exp_normalize() {
    let mut t = Tape::new();
    let y = eval(&mut t, Tensor::from_vec(vec![1.0, 2.0, 3.0]), |t, x| t.softmax(x, 0));
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (a, b) in y.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_empty_axis_and_non_finite() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 0])).unwrap();
    assert!(matches!(t.softmax(x, 1), Err(Error::EmptyAxis { .. })));
    assert!(matches!(
        t.leaf(Tensor::from_vec(vec![f64::NAN])),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn vector_length_cases() {
    let mut t = Tape::new();
    let y = eval(&mut t, Tensor::from_vec(vec![3.0, 4.0]), |t, x| t.vector_length(x, 0));
    assert_eq!(y.item(), 5.0);
    let y = eval(&mut t, Tensor::zeros(&[3]), |t, x| t.vector_length(x, 0));
    assert_eq!(y.item(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random(&[4, 5], &mut rng);
    let y = eval(&mut t, v.clone(), |t, x| t.vector_length(x, 1));
    for r in 0..4 {
        let mut sq = 0.0;
        for c in 0..5 {
            sq += v.at(&[r, c]) * v.at(&[r, c]);
        }
        assert!((y.data()[r] - sq.sqrt()).abs() < 1e-15);
    }
}

#[test]
fn squash_analytic_norms() {
    let mut t = Tape::new();
    let zero = eval(&mut t, Tensor::zeros(&[4]), |t, x| t.squash(x, 0));
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let unit = eval(&mut t, Tensor::from_vec(vec![0.6, 0.8]), |t, x| t.squash(x, 0));
    assert!(unit.max_abs_diff(&Tensor::from_vec(vec![0.3, 0.4])) < 1e-15);

    let three = eval(&mut t, Tensor::from_vec(vec![0.0, 3.0, 0.0]), |t, x| t.squash(x, 0));
    assert!(three.max_abs_diff(&Tensor::from_vec(vec![0.0, 0.9, 0.0])) < 1e-15);
}

#[test]
fn squash_gradient_is_zero_at_origin() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3])).unwrap();
    let y = t.squash(x, 0).unwrap();
    let s = t.reduce_sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn maxout_cases() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_vec(vec![1.0, -1.0])).unwrap();
    let b = t.leaf(Tensor::from_vec(vec![-1.0, 1.0])).unwrap();
    let m = t.maximum(&[a, b]).unwrap();
    assert_eq!(t.value(m).data(), &[1.0, 1.0]);

    let same = t.maximum(&[a, a]).unwrap();
    assert_eq!(t.value(same), t.value(a));

    let c = t.leaf(Tensor::zeros(&[3])).unwrap();
    assert!(matches!(t.maximum(&[a, c]), Err(Error::Shape { .. })));
}

#[test]
fn dropout_rate_zero_is_identity_and_inverted_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[1000], 1.0)).unwrap();
    assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = t.dropout(x, 0.2, &mut rng).unwrap();
    for &v in t.value(y).data() {
        assert!(v == 0.0 || (v - 1.25).abs() < 1e-15);
    }
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize), out: (usize, usize)) -> Tensor {
    let (h, w, cin) = (x.dim(0), x.dim(1), x.dim(2));
    let (kh, kw, cout) = (k.dim(0), k.dim(1), k.dim(3));
    let mut y = Tensor::zeros(&[out.0, out.1, cout]);
    for oy in 0..out.0 {
        for ox in 0..out.1 {
            for o in 0..cout {
                let mut acc = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        for c in 0..cin {
                            let iy = (oy * stride.0 + dy) as isize - pad.0 as isize;
                            let ix = (ox * stride.1 + dx) as isize - pad.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.at(&[iy as usize, ix as usize, c]) * k.at(&[dy, dx, c, o]);
                            }
                        }
                    }
                }
                y.set(&[oy, ox, o], acc);
            }
        }
    }
    y
}

#[test]
fn conv2d_identity_and_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[5, 4, 1], &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let y = t.conv2d(xv, k, (1, 1), Padding::Same).unwrap();
    assert_eq!(t.value(y), &x);

    let ones = t.constant(Tensor::full(&[6, 7, 1], 1.0)).unwrap();
    let k3 = t.constant(Tensor::full(&[3, 3, 1, 1], 1.0)).unwrap();
    let y = t.conv2d(ones, k3, (1, 1), Padding::Valid).unwrap();
    assert_eq!(t.shape(y), &[4, 5, 1]);
    assert!(t.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[9, 7, 2], &mut rng);
    let k = random(&[3, 3, 2, 3], &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let kv = t.constant(k.clone()).unwrap();
    let y = t.conv2d(xv, kv, (2, 2), Padding::Same).unwrap();
    // ceil(9/2)=5, total pad (5-1)*2+3-9 = 2 -> left 1; ceil(7/2)=4, total 2 -> left 1
    assert_eq!(t.shape(y), &[5, 4, 3]);
    let expected = naive_conv(&x, &k, (2, 2), (1, 1), (5, 4));
    assert!(t.value(y).max_abs_diff(&expected) < 1e-12);

    let y = t.conv2d(xv, kv, (1, 2), Padding::Valid).unwrap();
    let expected = naive_conv(&x, &k, (1, 2), (0, 0), (7, 3));
    assert!(t.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn conv2d_same_padding_puts_odd_cell_right() {
    // Input 4 wide, kernel 2, stride 1: total pad 1 goes to the right.
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let k = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 10.0]).unwrap()).unwrap();
    let y = t.conv2d(x, k, (1, 1), Padding::Same).unwrap();
    assert_eq!(t.value(y).data(), &[21.0, 32.0, 43.0, 4.0]);
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 2, 1])).unwrap();
    let k = t.constant(Tensor::zeros(&[3, 3, 1, 1])).unwrap();
    assert!(t.conv2d(x, k, (1, 1), Padding::Valid).is_err());
}

#[test]
fn matmul_hand_computed() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    let b = t.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap()).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn layer_norm_constant_slice_is_zero_before_gain() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[2, 3, 2], 4.0)).unwrap();
    let gain = t.constant(Tensor::full(&[6], 1.0)).unwrap();
    let bias = t.constant(Tensor::zeros(&[6])).unwrap();
    let y = t.layer_norm_slice(x, gain, bias, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_inference_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = random(&[4, 3, 2], &mut rng);
    let mut t = Tape::new();
    let x = t.constant(data.clone()).unwrap();
    let g = t.constant(Tensor::full(&[2], 1.0)).unwrap();
    let b = t.constant(Tensor::zeros(&[2])).unwrap();
    let y = t.batch_norm(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
    assert_eq!(t.value(y), &data);
    let y = t.batch_norm(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(t.value(y).max_abs_diff(&data) < 1e-5);
}

#[test]
fn window_pads_with_zeros() {
    let mut t = Tape::new();
    let data: Vec<f64> = (1..=12).map(f64::from).collect();
    let x = t.constant(Tensor::new(vec![3, 2, 2], data).unwrap()).unwrap();
    let w = t.window(x, 0, 2, 0).unwrap();
    assert_eq!(t.value(w).data(), &[0., 0., 0., 0., 0., 0., 0., 0., 1., 2., 3., 4.]);
    let w = t.window(x, 1, 1, 1).unwrap();
    let expected: Vec<f64> = (1..=12).map(f64::from).collect();
    assert_eq!(t.value(w).data(), expected.as_slice());
}

#[test]
fn backward_of_sum_is_ones_and_tape_is_single_use() {
    let mut t = Tape::new();
    let p = t.param(0, Tensor::from_vec(vec![0.5, -2.0, 3.0])).unwrap();
    let s = t.reduce_sum(p).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.param(0).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(t.backward(p), Err(Error::NonScalarLoss(_))));
}

#[test]
fn squared_norm_of_squash_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[6], &mut rng);
    check_gradient(x, |t, x| {
        let y = t.squash(x, 0)?;
        let sq = t.mul(y, y)?;
        t.reduce_sum(sq)
    });
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4, 2], &mut rng);
    let other = random(&[3, 4, 2], &mut rng);
    let mat = random(&[8, 3], &mut rng);
    let kernel = random(&[3, 2, 2, 3], &mut rng);
    let gain = random(&[8], &mut rng);
    let bias = random(&[8], &mut rng);
    let gamma = random(&[2], &mut rng);
    let w4 = random(&[4, 3, 2, 3], &mut rng);

    check_gradient(x.clone(), |t, x| {
        let o = t.constant(other.clone())?;
        let a = t.add(x, o)?;
        let b = t.sub(a, o)?;
        let c = t.mul(b, o)?;
        t.scale(c, 0.7)
    });
    check_gradient(x.clone(), |t, x| t.mul_const(x, (0..24).map(|i| (i % 3) as f64).collect()));
    check_gradient(x.clone(), |t, x| {
        let r = t.reshape(x, &[3, 8])?;
        let m = t.constant(mat.clone())?;
        t.matmul(r, m)
    });
    check_gradient(mat.clone(), |t, m| {
        let lhs = t.constant(x.clone().reshape(&[3, 8])?)?;
        t.matmul(lhs, m)
    });
    check_gradient(x.clone(), |t, x| t.slice(x, 1, 1, 2));
    check_gradient(x.clone(), |t, x| {
        let a = t.slice(x, 2, 0, 1)?;
        let b = t.slice(x, 2, 1, 1)?;
        t.concat(&[b, a, b], 2)
    });
    check_gradient(x.clone(), |t, x| {
        let a = t.slice(x, 0, 0, 1)?;
        let b = t.slice(x, 0, 2, 1)?;
        t.stack(&[a, b])
    });
    check_gradient(x.clone(), |t, x| t.window(x, 0, 1, 1));
    check_gradient(x.clone(), |t, x| t.window(x, 2, 2, 1));
    check_gradient(x.clone(), |t, x| t.sigmoid(x));
    for axis in 0..3 {
        check_gradient(x.clone(), |t, x| t.softmax(x, axis));
        check_gradient(x.clone(), |t, x| t.log_softmax(x, axis));
        check_gradient(x.clone(), |t, x| t.vector_length(x, axis));
        check_gradient(x.clone(), |t, x| t.squash(x, axis));
    }
    for mode in [MaskMode::Renormalize, MaskMode::ZeroAfterSoftmax] {
        check_gradient(mat.clone(), |t, m| t.masked_softmax(m, 1, mode));
    }
    check_gradient(x.clone(), |t, x| {
        let o = t.constant(other.clone())?;
        t.maximum(&[x, o])
    });
    check_gradient(x.clone(), |t, x| {
        let k = t.constant(kernel.clone())?;
        t.conv2d(x, k, (2, 1), Padding::Same)
    });
    check_gradient(kernel.clone(), |t, k| {
        let xv = t.constant(x.clone())?;
        t.conv2d(xv, k, (1, 2), Padding::Same)
    });
    check_gradient(x.clone(), |t, x| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(Tensor::from_vec(vec![0.1, -0.2]))?;
        Ok(t.batch_norm_train(x, g, b, 1e-5)?.0)
    });
    check_gradient(gamma.clone(), |t, g| {
        let xv = t.constant(x.clone())?;
        let b = t.constant(Tensor::from_vec(vec![0.1, -0.2]))?;
        Ok(t.batch_norm_train(xv, g, b, 1e-5)?.0)
    });
    check_gradient(x.clone(), |t, x| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(Tensor::from_vec(vec![0.1, -0.2]))?;
        t.batch_norm(x, g, b, &[0.3, -0.1], &[0.5, 2.0], 1e-5)
    });
    check_gradient(x.clone(), |t, x| {
        let g = t.constant(gain.clone())?;
        let b = t.constant(bias.clone())?;
        t.layer_norm_slice(x, g, b, 1e-5)
    });
    check_gradient(gain.clone(), |t, g| {
        let xv = t.constant(x.clone())?;
        let b = t.constant(bias.clone())?;
        t.layer_norm_slice(xv, g, b, 1e-5)
    });
    let u = random(&[4, 2], &mut rng);
    check_gradient(u.clone(), |t, u| {
        let w = t.constant(w4.clone())?;
        t.prediction_vectors(u, w)
    });
    check_gradient(w4.clone(), |t, w| {
        let uv = t.constant(u.clone())?;
        t.prediction_vectors(uv, w)
    });
    let uhat = random(&[4, 3, 3], &mut rng);
    let c = random(&[4, 3], &mut rng);
    let o = random(&[3, 3], &mut rng);
    check_gradient(uhat.clone(), |t, uh| {
        let cv = t.constant(c.clone())?;
        t.weighted_sum(cv, uh)
    });
    check_gradient(c.clone(), |t, cv| {
        let uh = t.constant(uhat.clone())?;
        t.weighted_sum(cv, uh)
    });
    check_gradient(uhat.clone(), |t, uh| {
        let ov = t.constant(o.clone())?;
        t.agreement(uh, ov)
    });
    check_gradient(o.clone(), |t, ov| {
        let uh = t.constant(uhat.clone())?;
        t.agreement(uh, ov)
    });
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.leaf(random(&[5, 6], &mut rng)).unwrap();
        let d = t.dropout(x, 0.3, &mut rng).unwrap();
        let s = t.squash(d, 1).unwrap();
        let l = t.log_softmax(s, 1).unwrap();
        t.value(l).clone()
    };
    assert_eq!(run().data(), run().data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let y = eval(&mut t, Tensor::from_vec(v), |t, x| t.softmax(x, 0));
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn squash_norm_in_unit_interval_and_keeps_direction(v in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let mut t = Tape::new();
            let y = eval(&mut t, Tensor::from_vec(v.clone()), |t, x| t.squash(x, 0));
            let sq: f64 = v.iter().map(|a| a * a).sum();
            let norm: f64 = y.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((0.0..1.0).contains(&norm));
            prop_assert!((norm - sq / (1.0 + sq)).abs() < 1e-12);
            if sq > 0.0 {
                let dotp: f64 = y.data().iter().zip(&v).map(|(a, b)| a * b).sum();
                prop_assert!((dotp - norm * sq.sqrt()).abs() < 1e-9 * (1.0 + sq));
            }
        }
    }
}
