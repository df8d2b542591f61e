//! Central finite-difference gradient checking in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ops::concat, ConvSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const STEP: f64 = 1e-6;

/// A scalar-valued function of several tensors, built on a tape.
pub type ScalarFn<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// Relative error `|a - n|_2 / max(|a|_2, |n|_2)` between the analytic
/// gradient and its central-difference estimate, maximised over inputs.
/// Inputs whose gradients are both (numerically) zero contribute 0.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &ScalarFn<'_>, step: f64) -> Result<f64> {
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &leaves)?;
    if out.value().len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    tape.backward(out)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 1e-9 {
            worst = worst.max(norm(&diff) / scale);
        } else {
            worst = worst.max(norm(&diff));
        }
    }
    Ok(worst)
}

/// One named operation exercised over random seeds.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

/// Result of running one [`GradCase`] over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

pub fn run_case(case: &GradCase, seeds: usize) -> Result<GradReport> {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let e = (case.run)(seed)?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradReport {
        name: case.name,
        seeds,
        max_rel_error: worst,
    })
}

pub(crate) fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `sum(out * r)` for a fixed random `r`, turning any tensor into a scalar
/// whose gradient exercises the full Jacobian.
pub fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut r = rng(seed, 0xabcdef);
    let w = uniform(&mut r, &out.shape(), -1.0, 1.0);
    let w = out.tape().constant(w);
    Ok(out.mul(w)?.sum_all())
}

fn dims(r: &mut impl Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(1..=4)).collect()
}

fn check(_seed: u64, inputs: Vec<Tensor<f64>>, f: &ScalarFn<'_>) -> Result<f64> {
    max_relative_error(&inputs, f, STEP)
}

fn case_add(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 1);
    let s = dims(&mut r, 3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].add(v[1])?, seed))
}

fn case_sub(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 2);
    let s = dims(&mut r, 2);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].sub(v[1])?, seed))
}

fn case_mul(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 3);
    let s = dims(&mut r, 3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].mul(v[1])?, seed))
}

fn case_scalar_broadcast(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 4);
    let s = dims(&mut r, 2);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &[], -1.0, 1.0)];
    check(seed, xs, &|_, v| {
        let a = v[0].mul(v[1])?;
        let b = v[1].sub(v[0])?;
        project(a.add(b)?, seed)
    })
}

fn case_scale(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 5);
    let s = dims(&mut r, 2);
    let k = r.random_range(-3.0..3.0);
    let c = r.random_range(-3.0..3.0);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &move |_, v| project(v[0].scale(k).add_scalar(c), seed))
}

fn case_relu(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 6);
    let s = dims(&mut r, 3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].relu(), seed))
}

fn case_matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 7);
    let d = dims(&mut r, 3);
    let xs = vec![
        uniform(&mut r, &[d[0], d[1]], -1.0, 1.0),
        uniform(&mut r, &[d[1], d[2]], -1.0, 1.0),
    ];
    check(seed, xs, &|_, v| project(v[0].matmul(v[1])?, seed))
}

fn case_batched_matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 8);
    let d = dims(&mut r, 4);
    let xs = vec![
        uniform(&mut r, &[d[0], d[1], d[2]], -1.0, 1.0),
        uniform(&mut r, &[d[0], d[2], d[3]], -1.0, 1.0),
    ];
    check(seed, xs, &|_, v| project(v[0].batched_matmul(v[1])?, seed))
}

fn case_transpose(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 9);
    let s = dims(&mut r, 3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].transpose()?, seed))
}

fn case_reduce(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 10);
    let s = dims(&mut r, 3);
    let axis = r.random_range(0..3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &move |_, v| {
        let a = v[0].sum_axis(axis)?;
        let b = v[0].mean_axis(axis)?;
        Ok(project(a, seed)?.add(project(b, seed + 1)?)?.add(v[0].mean_all())?)
    })
}

fn case_concat_narrow(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 11);
    let s = dims(&mut r, 3);
    let axis = r.random_range(0..3);
    let mut s2 = s.clone();
    s2[axis] = r.random_range(1..=3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s2, -1.0, 1.0)];
    check(seed, xs, &move |_, v| {
        let c = concat(&[v[0], v[1], v[0]], axis)?;
        let total = c.shape()[axis];
        let part = c.narrow(axis, 1, total - 1)?;
        project(part.reshape(vec![part.value().len()])?, seed)
    })
}

fn case_l2_normalize(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 12);
    let s = dims(&mut r, 3);
    let axis = r.random_range(0..3);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &move |_, v| project(v[0].l2_normalize(axis, 1e-12)?, seed))
}

fn case_cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 13);
    let rows = r.random_range(1..=5);
    let k = r.random_range(2..=6);
    let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
    let xs = vec![uniform(&mut r, &[rows, k], -3.0, 3.0)];
    check(seed, xs, &move |_, v| v[0].cross_entropy(&targets))
}

fn case_conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 14);
    let (b, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = r.random_range(1..=3);
    let stride = r.random_range(1..=2);
    let pad = r.random_range(0..=1);
    let h = r.random_range(k.max(2)..=5);
    let w = r.random_range(k.max(2)..=5);
    let xs = vec![
        uniform(&mut r, &[b, cin, h, w], -1.0, 1.0),
        uniform(&mut r, &[cout, cin, k, k], -1.0, 1.0),
        uniform(&mut r, &[cout], -1.0, 1.0),
    ];
    check(seed, xs, &move |_, v| {
        project(v[0].conv2d(v[1], Some(v[2]), ConvSpec::new(stride, pad))?, seed)
    })
}

fn case_max_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 15);
    let s = [r.random_range(1..=2), r.random_range(1..=3), 4, 6];
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| project(v[0].max_pool2d(2, 2)?, seed))
}

fn case_avg_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 16);
    let s = [r.random_range(1..=2), r.random_range(1..=3), 5, 4];
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| {
        let a = project(v[0].avg_pool2d(2, 1)?, seed)?;
        let b = project(v[0].global_avg_pool()?, seed + 7)?;
        a.add(b)
    })
}

fn case_batch_norm_train(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 17);
    let s = [r.random_range(2..=3), r.random_range(1..=3), 2, r.random_range(1..=3)];
    let c = s[1];
    let xs = vec![
        uniform(&mut r, &s, -2.0, 2.0),
        uniform(&mut r, &[c], 0.5, 1.5),
        uniform(&mut r, &[c], -0.5, 0.5),
    ];
    check(seed, xs, &|_, v| project(v[0].batch_norm(v[1], v[2], None, 1e-5)?.0, seed))
}

fn case_batch_norm_eval(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 18);
    let s = [r.random_range(1..=3), r.random_range(1..=3), 2, 2];
    let c = s[1];
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let xs = vec![
        uniform(&mut r, &s, -2.0, 2.0),
        uniform(&mut r, &[c], 0.5, 1.5),
        uniform(&mut r, &[c], -0.5, 0.5),
    ];
    check(seed, xs, &move |_, v| {
        project(v[0].batch_norm(v[1], v[2], Some((&mean, &var)), 1e-5)?.0, seed)
    })
}

fn case_linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 19);
    let d = dims(&mut r, 3);
    let xs = vec![
        uniform(&mut r, &[d[0], d[1]], -1.0, 1.0),
        uniform(&mut r, &[d[2], d[1]], -1.0, 1.0),
        uniform(&mut r, &[d[2]], -1.0, 1.0),
    ];
    check(seed, xs, &|_, v| project(v[0].linear(v[1], Some(v[2]))?, seed))
}

fn case_composite(seed: u64) -> Result<f64> {
    // Reused subexpression: x feeds both branches.
    let mut r = rng(seed, 20);
    let s = dims(&mut r, 2);
    let xs = vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)];
    check(seed, xs, &|_, v| {
        let h = v[0].mul(v[1])?.relu();
        let g = h.add(v[0])?.mul(v[0])?;
        project(g.l2_normalize(s.len() - 1, 1e-12)?, seed)
    })
}

/// Every differentiable tensor operation except `spike`.
pub fn tensor_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add", run: case_add },
        GradCase { name: "sub", run: case_sub },
        GradCase { name: "mul", run: case_mul },
        GradCase { name: "scalar_broadcast", run: case_scalar_broadcast },
        GradCase { name: "scale_add_scalar", run: case_scale },
        GradCase { name: "relu", run: case_relu },
        GradCase { name: "matmul", run: case_matmul },
        GradCase { name: "batched_matmul", run: case_batched_matmul },
        GradCase { name: "transpose", run: case_transpose },
        GradCase { name: "sum_mean_axis", run: case_reduce },
        GradCase { name: "concat_narrow", run: case_concat_narrow },
        GradCase { name: "l2_normalize", run: case_l2_normalize },
        GradCase { name: "cross_entropy", run: case_cross_entropy },
        GradCase { name: "conv2d", run: case_conv2d },
        GradCase { name: "max_pool2d", run: case_max_pool },
        GradCase { name: "avg_pool2d", run: case_avg_pool },
        GradCase { name: "batch_norm_train", run: case_batch_norm_train },
        GradCase { name: "batch_norm_eval", run: case_batch_norm_eval },
        GradCase { name: "linear", run: case_linear },
        GradCase { name: "composite", run: case_composite },
    ]
}

/// Largest gap between the spike op's backward pass and the arctangent
/// surrogate derivative written out in closed form.
pub fn spike_surrogate_error(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 21);
    let alpha = r.random_range(0.5..4.0);
    let threshold = r.random_range(-1.0..1.0);
    let x = uniform(&mut r, &[64], -3.0, 3.0);
    let weights = uniform(&mut r, &[64], -1.0, 1.0);
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let s = v.spike_with(threshold, super::ArcTanSurrogate { alpha });
    tape.backward(s.mul(tape.constant(weights.clone()))?.sum_all())?;
    let g = v.grad().ok_or_else(|| Error::Numerical("spike produced no gradient".into()))?;
    let pi = std::f64::consts::PI;
    let mut worst = 0.0f64;
    for ((&u, &w), &got) in x.data().iter().zip(weights.data()).zip(g.data()) {
        let z = pi * alpha * (u - threshold) / 2.0;
        let want = w * alpha / (2.0 * (1.0 + z * z));
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}
