//! Elementwise, linear-algebra and reduction operations on [`Var`].

use std::f64::consts::PI;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(Broadcast::Same)
    } else if nb == 1 {
        Ok(Broadcast::RightScalar)
    } else if na == 1 {
        Ok(Broadcast::LeftScalar)
    } else {
        Err(shape_err!("cannot broadcast {:?} with {:?}", a, b))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {} out of range for shape {:?}", axis, shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Arctangent surrogate for the Heaviside spike function.
///
/// The forward pass is a hard threshold; the backward pass substitutes
/// `alpha / (2 (1 + (pi alpha u / 2)^2))`, the derivative of
/// `atan(pi alpha u / 2) / pi + 1/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcTanSurrogate {
    pub alpha: f64,
}

impl Default for ArcTanSurrogate {
    fn default() -> Self {
        ArcTanSurrogate { alpha: 2.0 }
    }
}

impl ArcTanSurrogate {
    pub fn derivative<F: Scalar>(&self, u: F) -> F {
        let a = self.alpha;
        let z = PI * a * u.as_f64() / 2.0;
        F::of(a / (2.0 * (1.0 + z * z)))
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    fn binary(
        self,
        other: Var<'t, F>,
        f: impl Fn(F, F) -> F,
        da: impl Fn(F, F) -> F + 'static,
        db: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var<'t, F>> {
        let av = self.value();
        let bv = other.value();
        let mode = broadcast_mode(av.shape(), bv.shape())?;
        let (shape, n) = match mode {
            Broadcast::LeftScalar => (bv.shape().to_vec(), bv.len()),
            _ => (av.shape().to_vec(), av.len()),
        };
        let pick = move |t: &Tensor<F>, i: usize, scalar: bool| {
            if scalar {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        let (a_sc, b_sc) = (mode == Broadcast::LeftScalar, mode == Broadcast::RightScalar);
        let data = (0..n)
            .map(|i| f(pick(&av, i, a_sc), pick(&bv, i, b_sc)))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let mut ga = None;
                let mut gb = None;
                if needs[0] {
                    let it = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * da(pick(&av, i, a_sc), pick(&bv, i, b_sc)));
                    ga = Some(if a_sc { vec![it.sum()] } else { it.collect() });
                }
                if needs[1] {
                    let it = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * db(pick(&av, i, a_sc), pick(&bv, i, b_sc)));
                    gb = Some(if b_sc { vec![it.sum()] } else { it.collect() });
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, |a, b| a + b, |_, _| F::one(), |_, _| F::one())
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, |a, b| a - b, |_, _| F::one(), |_, _| -F::one())
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    fn unary(
        self,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var<'t, F> {
        let xv = self.value();
        let out = xv.map(f);
        let yv = std::rc::Rc::new(out.clone());
        self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gi, (&x, &y))| gi * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(self, s: F) -> Var<'t, F> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: F) -> Var<'t, F> {
        self.unary(move |x| x + s, |_, _| F::one())
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn relu(self) -> Var<'t, F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Heaviside step at `threshold` with the default arctangent surrogate.
    pub fn spike(self, threshold: F) -> Var<'t, F> {
        self.spike_with(threshold, ArcTanSurrogate::default())
    }

    pub fn spike_with(self, threshold: F, surrogate: ArcTanSurrogate) -> Var<'t, F> {
        self.unary(
            move |v| {
                if v >= threshold {
                    F::one()
                } else {
                    F::zero()
                }
            },
            move |v, _| surrogate.derivative(v - threshold),
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let xv = self.value();
        let out = (*xv).clone().reshape(shape)?;
        Ok(self
            .tape()
            .op(out, &[self], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// `(M, K) x (K, N) -> (M, N)`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let av = self.value();
        let bv = other.value();
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dims {} vs {}", k, k2));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm_raw(m, k, n, F::one(), av.data(), k, 1, bv.data(), n, 1, F::zero(), &mut out, n, 1);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm_raw(m, n, k, F::one(), g, n, 1, bv.data(), 1, n, F::zero(), &mut ga, k, 1);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm_raw(k, m, n, F::one(), av.data(), 1, k, g, n, 1, F::zero(), &mut gb, n, 1);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `(B, M, K) x (B, K, N) -> (B, M, N)`.
    pub fn batched_matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let av = self.value();
        let bv = other.value();
        let (&[bs, m, k], &[bs2, k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err!(
                "batched_matmul needs rank-3 operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        };
        if bs != bs2 || k != k2 {
            return Err(shape_err!(
                "batched_matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let mut out = vec![F::zero(); bs * m * n];
        for b in 0..bs {
            F::gemm_raw(
                m,
                k,
                n,
                F::one(),
                &av.data()[b * m * k..],
                k,
                1,
                &bv.data()[b * k * n..],
                n,
                1,
                F::zero(),
                &mut out[b * m * n..],
                n,
                1,
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.tape().op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![F::zero(); bs * m * k];
                    for b in 0..bs {
                        F::gemm_raw(
                            m,
                            n,
                            k,
                            F::one(),
                            &g[b * m * n..],
                            n,
                            1,
                            &bv.data()[b * k * n..],
                            1,
                            n,
                            F::zero(),
                            &mut ga[b * m * k..],
                            k,
                            1,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![F::zero(); bs * k * n];
                    for b in 0..bs {
                        F::gemm_raw(
                            k,
                            m,
                            n,
                            F::one(),
                            &av.data()[b * m * k..],
                            1,
                            k,
                            &g[b * m * n..],
                            n,
                            1,
                            F::zero(),
                            &mut gb[b * k * n..],
                            n,
                            1,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let xv = self.value();
        let shape = xv.shape();
        if shape.len() < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", shape));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = xv.len() / (rows * cols).max(1);
        let mut out_shape = shape.to_vec();
        out_shape.swap(r - 2, r - 1);
        let swap = move |src: &[F]| {
            let mut dst = vec![F::zero(); src.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[off + j * rows + i] = src[off + i * cols + j];
                    }
                }
            }
            dst
        };
        let out = Tensor::new(out_shape, swap(xv.data()))?;
        let unswap = move |src: &[F]| {
            let mut dst = vec![F::zero(); src.len()];
            for b in 0..batch {
                let off = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[off + i * cols + j] = src[off + j * rows + i];
                    }
                }
            }
            dst
        };
        Ok(self
            .tape()
            .op(out, &[self], Box::new(move |g, _| vec![Some(unswap(g))])))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce_axis(axis, false)
    }

    /// Averages over `axis`, removing it from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, F>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t, F>> {
        let xv = self.value();
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let w = if mean {
            F::one() / F::of(len.max(1) as f64)
        } else {
            F::one()
        };
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= w);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..][..inner];
                        let src = &g[o * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * w);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let xv = self.value();
        let n = xv.len();
        let out = Tensor::scalar(xv.sum());
        self.tape()
            .op(out, &[self], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let n = self.value().len().max(1);
        self.sum_all().scale(F::one() / F::of(n as f64))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let xv = self.value();
        let (outer, full, inner) = axis_split(xv.shape(), axis)?;
        if start + len > full {
            return Err(shape_err!(
                "narrow [{}, {}) exceeds axis {} of length {}",
                start,
                start + len,
                axis,
                full
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rescales slices along `axis` to unit Euclidean norm; norms below
    /// `eps` are clamped to `eps`.
    pub fn l2_normalize(self, axis: usize, eps: F) -> Result<Var<'t, F>> {
        let xv = self.value();
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let x = xv.data();
        let mut norms = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = F::zero();
                for l in 0..len {
                    let v = x[(o * len + l) * inner + i];
                    s += v * v;
                }
                norms[o * inner + i] = s.sqrt();
            }
        }
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let d = norms[o * inner + i].max(eps);
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    y[idx] = x[idx] / d;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y.clone())?;
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        let at = |l: usize| (o * len + l) * inner + i;
                        if nrm > eps {
                            let dot: F = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = (g[at(l)] - y[at(l)] * dot) / nrm;
                            }
                        } else {
                            for l in 0..len {
                                gx[at(l)] = g[at(l)] / eps;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, where rows are all
    /// leading axes and the last axis holds the `K` class scores.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, F>> {
        let xv = self.value();
        let k = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err!("cross_entropy on a rank-0 tensor"))?;
        if k == 0 {
            return Err(shape_err!("cross_entropy with zero classes"));
        }
        let rows = xv.len() / k;
        if targets.len() != rows {
            return Err(shape_err!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Validation(format!(
                "target index {} out of range for {} classes",
                bad, k
            )));
        }
        let mut probs = vec![F::zero(); xv.len()];
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv.data()[r * k..][..k];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let p = &mut probs[r * k..][..k];
            let mut z = F::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - mx).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += z.ln() + mx - row[t];
        }
        let inv_rows = F::one() / F::of(rows.max(1) as f64);
        let out = Tensor::scalar(total * inv_rows);
        let targets = targets.to_vec();
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let s = g[0] * inv_rows;
                let mut gx: Vec<F> = probs.iter().map(|&p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * k + t] -= s;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, F: Scalar>(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let tape: &'t Tape<F> = first.tape();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    let (outer, _, inner) = axis_split(&base, axis)?;
    let mut lens = Vec::with_capacity(parts.len());
    for v in &values {
        let s = v.shape();
        let same_rest = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(shape_err!("concat {:?} with {:?} on axis {}", base, s, axis));
        }
        lens.push(s[axis]);
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..][..l * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let out = Tensor::new(shape, out)?;
    Ok(tape.op(
        out,
        parts,
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<F>>> = lens
                .iter()
                .zip(needs)
                .map(|(&l, &need)| need.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (slot, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[off..][..l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }),
    ))
}
