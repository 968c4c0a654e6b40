#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srf_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient of the scalar `f(x)`
/// and central differences, over the listed coordinates of `x`.
pub fn gradient_error(x: &Tensor, coords: &[usize], f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone()).unwrap();
    let y = f(&mut tape, v);
    let grads = tape.backward(y).unwrap();
    let analytic = grads.wrt(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()]);
    let value = |x: Tensor| {
        let mut t = Tape::new();
        let v = t.leaf(x).unwrap();
        let y = f(&mut t, v);
        t.value(y).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (value(p) - value(m)) / (2.0 * h);
        worst = worst.max(rel_err(numeric, analytic[i]));
    }
    worst
}

/// Weighted sum of all entries with fixed pseudo-random weights.
pub fn contract(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = random(&shape, 1.0, &mut rng(seed));
    let w = tape.constant(w).unwrap();
    let p = tape.mul(y, w).unwrap();
    tape.reduce_sum(p).unwrap()
}
